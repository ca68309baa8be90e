"""Two-stage training, checkpoints, and the shared inference helpers."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .container import read_container, write_container
from .encoder import crop_offsets, normalize_imagenet, views_from_offsets
from .errors import CheckpointError, ConfigError, DivergenceError
from .globalfusion import Phase2Model, relative_offsets, stage2_loss_terms
from .ingest import TRAIN, spot_table
from .magfusion import Phase1Model, stage1_loss_terms
from .protobank import build_bank, choose_prototype_count, retrieve_indices

log = logging.getLogger(__name__)

FORMAT_VERSION = "MMAPCKPT-1"
STREAM_AUGMENT = 1
STREAM_SHUFFLE = 2


def deterministic_requested():
    return os.environ.get("MMAP_DETERMINISTIC", "0") not in ("", "0", "false", "False")


def set_deterministic(enabled=True):
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def cosine_lr(t, cfg):
    """Cosine annealing from ``lr_max`` at ``t = 0`` to ``lr_min`` at ``t = epochs``."""
    if not 0 <= t <= cfg.epochs:
        raise ConfigError(f"epoch {t} outside [0, {cfg.epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / cfg.epochs))


def spot_rng(seed, epoch, index, stream=STREAM_AUGMENT):
    """Per-spot generator, independent of batching and worker layout."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, epoch, index]))


def augment_patch(patch, rng, cfg):
    """Flip (p = 0.5), right-angle rotation, then per-channel multiplicative jitter.

    Returns float32 in [0, 1]; uint8 input is scaled by 1/255 first.
    """
    x = np.asarray(patch)
    x = x.astype(np.float32) / 255.0 if x.dtype == np.uint8 else x.astype(np.float32)
    if cfg.flip and rng.random() < 0.5:
        x = x[:, ::-1]
    if cfg.rotate:
        x = np.rot90(x, k=int(rng.integers(4)), axes=(0, 1))
    if cfg.jitter > 0:
        scale = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter, size=3).astype(np.float32)
        x = np.clip(x * scale, 0.0, 1.0)
    return np.ascontiguousarray(x)


def batch_views(table, indices, mode, input_size, train_cfg=None, epoch=0, augment=False):
    """Normalized B x 3 x 3 x S x S views for the given spot indices."""
    p = table.patches.shape[1]
    patches, offsets = [], []
    for i in indices:
        if mode == "random":
            rng = spot_rng(train_cfg.seed, epoch, int(i))
            patch = augment_patch(table.patches[i], rng, train_cfg) if augment \
                else table.patches[i].astype(np.float32) / 255.0
            offsets.append(crop_offsets(p, "random", rng))
        else:
            patch = table.patches[i].astype(np.float32) / 255.0
            offsets.append(crop_offsets(p, "center"))
        patches.append(patch)
    x = torch.from_numpy(np.stack(patches))
    return normalize_imagenet(views_from_offsets(x, offsets, input_size))


@dataclass
class Checkpoint:
    stage: str
    arrays: dict
    config: dict
    seed: int
    epoch: int
    gene_names: list
    banks: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    format_version: str = FORMAT_VERSION

    def run_config(self):
        return RunConfig.from_dict(self.config)

    def _state(self, prefix):
        n = len(prefix)
        return {k[n:]: torch.from_numpy(v.copy()) for k, v in self.arrays.items()
                if k.startswith(prefix)}

    def phase1_model(self):
        model = Phase1Model(self.run_config().model, len(self.gene_names))
        model.load_state_dict(self._state("phase1."))
        model.eval()
        return model

    def phase2_model(self):
        if self.stage != "stage2":
            raise CheckpointError("checkpoint has no phase-2 parameters")
        cfg = self.run_config()
        model = Phase2Model(cfg.model, len(self.gene_names), cfg.bank.aggregation)
        model.load_state_dict(self._state("phase2."))
        model.eval()
        return model

    def parameter_hash(self):
        import hashlib
        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()

    def save(self, path):
        arrays = dict(self.arrays)
        bank_meta = {}
        for sid, bank in self.banks.items():
            arrays[f"bank.{sid}.centroids"] = bank.centroids
            arrays[f"bank.{sid}.centroid_centers"] = bank.centroid_centers
            arrays[f"bank.{sid}.member_counts"] = bank.member_counts
            bank_meta[sid] = {"image_hw": list(bank.image_hw), "seed": bank.seed,
                              "config_hash": bank.config_hash}
        write_container(path, arrays, {
            "format_version": self.format_version, "stage": self.stage,
            "config": self.config, "seed": self.seed, "epoch": self.epoch,
            "gene_names": list(self.gene_names), "banks": bank_meta,
            "history": self.history,
        })

    @classmethod
    def load(cls, path):
        from .protobank import PrototypeBank
        arrays, meta = read_container(path)
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format {meta.get('format_version')!r}")
        banks = {}
        for sid, info in meta.get("banks", {}).items():
            banks[sid] = PrototypeBank(
                sid, arrays.pop(f"bank.{sid}.centroids"),
                arrays.pop(f"bank.{sid}.centroid_centers"),
                arrays.pop(f"bank.{sid}.member_counts"),
                tuple(info["image_hw"]), info["seed"], info["config_hash"])
        return cls(meta["stage"], arrays, meta["config"], meta["seed"], meta["epoch"],
                   meta["gene_names"], banks, meta.get("history", []))


def _module_arrays(prefix, module):
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _check_finite(loss, epoch, batch):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {batch}", epoch, batch)


def _append_log(path, row):
    if path is None:
        return
    path = Path(path)
    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write("stage\tepoch\tlr\tmean_l_ge\tmean_l_mag\tseconds\n")
        fh.write(f"{row['stage']}\t{row['epoch']}\t{row['lr']:.6e}\t{row['l_ge']:.6f}\t"
                 f"{row['l_mag']:.6f}\t{row['seconds']:.2f}\n")


def _batches(n, batch_size, seed, epoch):
    order = spot_rng(seed, epoch, 0, STREAM_SHUFFLE).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def run_stage1(bundle, cfg, log_path=None, table=None):
    """Train encoder, magnification fusion and the stage-1 head; returns a checkpoint."""
    cfg = cfg if isinstance(cfg, RunConfig) else RunConfig(train=cfg)
    tc = cfg.train
    tc.validate()
    if deterministic_requested():
        set_deterministic(True)
    table = table or spot_table(bundle, TRAIN)
    if len(table) == 0:
        raise ConfigError("train split is empty")
    torch.manual_seed(tc.seed)
    model = Phase1Model(cfg.model, bundle.n_genes)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=tc.lr_max, weight_decay=0.0)
    targets = torch.from_numpy(table.targets)
    history = []
    for epoch in range(tc.epochs):
        lr = cosine_lr(epoch, tc)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        t0 = time.perf_counter()
        sums = np.zeros(2)
        steps = 0
        for b, idx in enumerate(_batches(len(table), tc.batch_size, tc.seed, epoch)):
            views = batch_views(table, idx, "random", cfg.model.input_size, tc, epoch, True)
            out = model(views)
            loss, l_ge, l_mag = stage1_loss_terms(out["pred"], targets[idx], out["f"],
                                                  out["e0"], tc.gamma1)
            _check_finite(loss, epoch, b)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += len(idx) * np.array([l_ge.item(), l_mag.item()])
            steps += 1
        row = {"stage": "stage1", "epoch": epoch + 1, "lr": lr, "steps": steps,
               "l_ge": float(sums[0] / len(table)), "l_mag": float(sums[1] / len(table)),
               "seconds": time.perf_counter() - t0}
        _append_log(log_path, row)
        log.info("stage1 epoch %d lr %.2e l_ge %.4f l_mag %.4f", epoch + 1, lr,
                 row["l_ge"], row["l_mag"])
        history.append({k: row[k] for k in ("epoch", "lr", "steps", "l_ge", "l_mag")})
    model.eval()
    return Checkpoint("stage1", _module_arrays("phase1.", model), cfg.to_dict(), tc.seed,
                      tc.epochs, list(bundle.gene_names), history=history)


@torch.no_grad()
def phase1_features(model, table, batch_size=64, input_size=None):
    """Center-crop phase-1 outputs for every spot: dict of numpy arrays."""
    model.eval()
    size = input_size or model.encoder.input_size
    keys = ("f", "e0", "e2", "pred")
    parts = {k: [] for k in keys}
    for start in range(0, len(table), batch_size):
        idx = np.arange(start, min(start + batch_size, len(table)))
        out = model(batch_views(table, idx, "center", size))
        for k in keys:
            parts[k].append(out[k].numpy())
    return {k: np.concatenate(v) if v else np.zeros((0, 0), np.float32)
            for k, v in parts.items()}


def build_banks(table, features, cfg, seed):
    """One prototype bank per slide in ``table`` from its center-crop fused features."""
    banks = {}
    for k, sid in enumerate(table.slide_ids):
        rows = table.slide_index == k
        if not rows.any():
            continue
        banks[sid] = build_bank(features[rows], table.centers[rows], sid, cfg.bank, seed,
                                table.slide_shapes[k])
    return banks


def gather_prototypes(f, slide_index, centers, table_slide_ids, banks, strategy, use_pos,
                      dtype=torch.float32):
    """Retrieve and pad prototypes for a batch; returns ``(protos, mask, offsets)``."""
    f = np.asarray(f, dtype=np.float64)
    b = f.shape[0]
    picks = [None] * b
    for k in np.unique(slide_index):
        sid = table_slide_ids[k]
        if sid not in banks:
            raise ConfigError(f"no prototype bank for slide {sid}")
        bank = banks[sid]
        rows = np.flatnonzero(slide_index == k)
        L = choose_prototype_count(bank.K, strategy)
        idx, _ = retrieve_indices(f[rows], bank.centroids, L)
        for r, ix in zip(rows, idx):
            picks[r] = (bank, ix)
    lmax = max(len(ix) for _, ix in picks)
    d = f.shape[1]
    protos = np.zeros((b, lmax, d))
    mask = np.zeros((b, lmax), dtype=bool)
    offsets = np.zeros((b, lmax, 2))
    for r, (bank, ix) in enumerate(picks):
        protos[r, :len(ix)] = bank.centroids[ix]
        mask[r, :len(ix)] = True
        if use_pos:
            offsets[r, :len(ix)] = relative_offsets(centers[r], bank.centroid_centers[ix],
                                                    bank.image_hw)
    return (torch.as_tensor(protos, dtype=dtype), torch.from_numpy(mask),
            torch.as_tensor(offsets, dtype=dtype) if use_pos else None)


def init_phase2(phase1, cfg, n_genes):
    model = Phase2Model(cfg.model, n_genes, cfg.bank.aggregation)
    with torch.no_grad():
        for head in (model.heads.mlp1, model.heads.mlp2, model.heads.mlp3):
            head.weight.copy_(phase1.head.weight)
            head.bias.copy_(phase1.head.bias)
        attention = getattr(model.aggregator, "attention", None)
        if attention is not None:
            # enrichment starts as the identity around f
            attention.attn.o.weight.zero_()
            attention.attn.o.bias.zero_()
    return model


def run_stage2(bundle, stage1, cfg=None, banks=None, log_path=None, table=None):
    """Freeze phase 1, build (or reuse) per-slide banks, train the phase-2 modules."""
    cfg = cfg or stage1.run_config()
    tc = cfg.train
    tc.validate()
    if deterministic_requested():
        set_deterministic(True)
    if stage1.gene_names != list(bundle.gene_names):
        raise ConfigError("checkpoint genes do not match the dataset")
    table = table or spot_table(bundle, TRAIN)
    if len(table) == 0:
        raise ConfigError("train split is empty")
    phase1 = stage1.phase1_model()
    for p in phase1.parameters():
        p.requires_grad_(False)
    feats = phase1_features(phase1, table)
    banks = dict(banks or {})
    missing = [sid for sid in table.slide_ids if sid not in banks]
    if missing:
        sub = _subtable(table, missing)
        banks.update(build_banks(sub, feats["f"][_rows_for(table, missing)], cfg, tc.seed))

    torch.manual_seed(tc.seed + 1)
    model = init_phase2(phase1, cfg, bundle.n_genes)
    params = [p for p in model.parameters() if p.requires_grad]
    epochs = tc.stage2_epochs or tc.epochs
    sched = dataclasses.replace(tc, epochs=epochs)
    opt = torch.optim.Adam(params, lr=tc.lr_max, weight_decay=0.0)
    targets = torch.from_numpy(table.targets)
    use_pos = cfg.bank.aggregation == "cross_attn_pos"
    history = []
    for epoch in range(epochs):
        lr = cosine_lr(epoch, sched)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        t0 = time.perf_counter()
        sums = np.zeros(2)
        for b, idx in enumerate(_batches(len(table), tc.batch_size, tc.seed + 1, epoch)):
            with torch.no_grad():
                views = batch_views(table, idx, "random", cfg.model.input_size, tc, epoch, True)
                out1 = phase1(views)
            protos, mask, offsets = gather_prototypes(
                out1["f"].numpy(), table.slide_index[idx], table.centers[idx],
                table.slide_ids, banks, cfg.bank.prototypes, use_pos)
            out2 = model(out1, protos, mask, offsets)
            loss, l_ge, l_mag = stage2_loss_terms(out2["pred"], targets[idx], out1["f"],
                                                  out2["h"], tc.gamma2)
            _check_finite(loss, epoch, b)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += len(idx) * np.array([l_ge.item(), l_mag.item()])
        row = {"stage": "stage2", "epoch": epoch + 1, "lr": lr,
               "l_ge": float(sums[0] / len(table)), "l_mag": float(sums[1] / len(table)),
               "seconds": time.perf_counter() - t0}
        _append_log(log_path, row)
        log.info("stage2 epoch %d lr %.2e l_ge %.4f l_mag %.4f", epoch + 1, lr,
                 row["l_ge"], row["l_mag"])
        history.append({k: row[k] for k in ("epoch", "lr", "l_ge", "l_mag")})
    model.eval()
    arrays = {**stage1.arrays, **_module_arrays("phase2.", model)}
    return Checkpoint("stage2", arrays, cfg.to_dict(), tc.seed, epochs,
                      list(bundle.gene_names), banks, history)


def _rows_for(table, slide_ids):
    keep = [table.slide_ids.index(s) for s in slide_ids]
    return np.isin(table.slide_index, keep)


def _subtable(table, slide_ids):
    rows = _rows_for(table, slide_ids)
    remap = {table.slide_ids.index(s): j for j, s in enumerate(slide_ids)}
    return dataclasses.replace(
        table, patches=table.patches[rows], targets=table.targets[rows],
        centers=table.centers[rows],
        slide_index=np.array([remap[int(k)] for k in table.slide_index[rows]], dtype=np.int64),
        spot_ids=[s for s, r in zip(table.spot_ids, rows) if r],
        slide_ids=list(slide_ids),
        slide_shapes=[table.slide_shapes[table.slide_ids.index(s)] for s in slide_ids])


@torch.no_grad()
def predict(checkpoint, table, stage=None, banks=None):
    """Deterministic center-crop predictions (S x g) for every spot in ``table``."""
    stage = stage or checkpoint.stage
    cfg = checkpoint.run_config()
    phase1 = checkpoint.phase1_model()
    feats = phase1_features(phase1, table)
    if stage == "stage1":
        return feats["pred"].astype(np.float64)
    if checkpoint.stage != "stage2":
        raise CheckpointError("stage-2 predictions need a stage-2 checkpoint")
    model = checkpoint.phase2_model()
    banks = dict(banks if banks is not None else checkpoint.banks)
    missing = [s for s in table.slide_ids if s not in banks]
    if missing:
        sub = _subtable(table, missing)
        banks.update(build_banks(sub, feats["f"][_rows_for(table, missing)], cfg,
                                 checkpoint.seed))
    use_pos = cfg.bank.aggregation == "cross_attn_pos"
    out1 = {k: torch.from_numpy(v) for k, v in feats.items()}
    preds = []
    for start in range(0, len(table), 64):
        idx = np.arange(start, min(start + 64, len(table)))
        protos, mask, offsets = gather_prototypes(
            feats["f"][idx], table.slide_index[idx], table.centers[idx], table.slide_ids,
            banks, cfg.bank.prototypes, use_pos)
        sub = {k: v[idx] for k, v in out1.items()}
        preds.append(model(sub, protos, mask, offsets)["pred"].numpy())
    return np.concatenate(preds).astype(np.float64)

