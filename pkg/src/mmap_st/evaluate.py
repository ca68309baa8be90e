"""Per-gene correlation, error metrics, model evaluation and cluster maps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import config_hash
from .errors import ConfigError, ShapeError
from .ingest import TEST, spot_table
from .protobank import fit_kmeans
from .train import predict


@dataclass
class MetricsReport:
    pcc_per_gene: list
    pcc_mean: float
    mse: float
    mae: float
    n_spots: int
    n_genes: int
    config_hash: str

    def to_json(self):
        return json.dumps(asdict(self), indent=2) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def pearson_per_gene(pred, truth):
    """Column-wise Pearson correlation across spots; zero-variance columns score 0."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.shape[0] < 2:
        raise ConfigError("need at least two spots for a correlation")
    a = pred - pred.mean(0)
    b = truth - truth.mean(0)
    num = (a * b).sum(0)
    den = np.sqrt((a * a).sum(0) * (b * b).sum(0))
    pcc = np.zeros(pred.shape[1])
    ok = den > 0
    pcc[ok] = np.clip(num[ok] / den[ok], -1.0, 1.0)
    return pcc, float(pcc.mean())


def compute_errors(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    diff = pred - truth
    return float(np.mean(diff ** 2)), float(np.mean(np.abs(diff)))


def metrics_report(pred, truth, cfg_hash=""):
    pcc, mean = pearson_per_gene(pred, truth)
    mse, mae = compute_errors(pred, truth)
    return MetricsReport([float(v) for v in pcc], mean, mse, mae, int(pred.shape[0]),
                         int(pred.shape[1]), cfg_hash)


def evaluate_model(checkpoint, bundle, split=TEST, stage=None, return_predictions=False):
    """Center-crop inference over ``split`` and the stacked-matrix metrics."""
    stage = stage or checkpoint.stage
    if stage == "stage2" and checkpoint.stage != "stage2":
        raise ConfigError("stage-2 evaluation needs a stage-2 checkpoint")
    if list(bundle.gene_names) != list(checkpoint.gene_names):
        raise ConfigError("checkpoint genes do not match the dataset")
    table = spot_table(bundle, split)
    if len(table) == 0:
        raise ConfigError(f"{split} split is empty")
    pred = predict(checkpoint, table, stage)
    model_cfg = {k: v for k, v in checkpoint.config.items() if k != "data"}
    report = metrics_report(pred, table.targets, config_hash(
        {"config": model_cfg, "stage": stage, "split": split}))
    if return_predictions:
        return report, pred, table
    return report


PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def render_cluster_map(pred, centers, k=5, seed=0, out=None, title=None, image_hw=None):
    """K-means on predicted expression; optionally writes a scatter PNG. Returns labels."""
    pred = np.asarray(pred, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if k < 1 or pred.shape[0] < k:
        raise ConfigError(f"cannot form {k} clusters from {pred.shape[0]} spots")
    _, labels = fit_kmeans(pred, k, seed)
    if out is not None:
        from .plotting import cluster_map_figure, save_figure
        fig = cluster_map_figure(centers, labels, PALETTE, title=title, image_hw=image_hw)
        save_figure(fig, out)
    return labels


def write_labels(path, spot_ids, labels):
    with open(path, "w") as fh:
        fh.write("spot_id\tlabel\n")
        for sid, lab in zip(spot_ids, labels):
            fh.write(f"{sid}\t{int(lab)}\n")
