"""Command-line entry point: ``mmap-st <subcommand> [flags]``.

Exit status: 0 success, 1 domain error (message on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import IngestConfig, load_config, update_section
from .errors import MMAPError
from .ingest import TEST, TRAIN, generate_synthetic, load_dataset, spot_table, write_dataset

log = logging.getLogger("mmap_st")

RUNS = Path("mmap_runs")
DEFAULT_OUT = {
    "ingest": RUNS / "ingest", "train1": RUNS / "stage1", "bank": RUNS / "banks",
    "train2": RUNS / "stage2", "eval": RUNS / "eval", "viz": RUNS / "viz",
}
NEIGHBOR_GRID = ("4", "8", "16", "32", "adaptive")
AGGREGATION_GRID = ("mean", "sum", "cross_attn", "cross_attn_pos")

# shorthand flag -> (section, key)
SHORTHAND = {
    "epochs": ("train", "epochs"), "lr": ("train", "lr_max"),
    "batch_size": ("train", "batch_size"), "stage2_epochs": ("train", "stage2_epochs"),
    "input_size": ("model", "input_size"), "dim": ("model", "dim"),
    "depth": ("model", "depth"), "vit_patch": ("model", "vit_patch"),
    "prototypes": ("bank", "prototypes"), "aggregation": ("bank", "aggregation"),
    "n_hvg": ("ingest", "n_hvg"), "min_spots": ("ingest", "min_spots"),
    "patch_size": ("ingest", "patch_size"),
}


def _common(p, data=True, out=True, checkpoint=False):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int, help="overrides [train] seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value (repeatable)")
    if data:
        p.add_argument("--data", help="dataset root")
    if out:
        p.add_argument("--out", help="output directory")
    if checkpoint:
        p.add_argument("--checkpoint", help="model checkpoint (.ckpt)")
    for flag, (section, key) in SHORTHAND.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None,
                       help=f"overrides [{section}] {key}")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="mmap-st", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p, data=False)
    for name in ("n_slides", "spots_per_slide", "n_genes", "n_test_slides"):
        p.add_argument("--" + name.replace("_", "-"), dest="synth_" + name, type=int)
    p.add_argument("--noise", dest="synth_noise", type=float)
    p.add_argument("--layout", dest="synth_layout", choices=("regions", "blobs"))

    p = sub.add_parser("ingest", help="load and preprocess a dataset, report counts")
    _common(p)

    p = sub.add_parser("train1", help="stage 1: encoder + magnification fusion")
    _common(p)

    p = sub.add_parser("bank", help="build per-slide prototype banks from a stage-1 model")
    _common(p, checkpoint=True)

    p = sub.add_parser("train2", help="stage 2: prototype-aware enrichment")
    _common(p, checkpoint=True)
    p.add_argument("--banks", help="directory of .bank files (default: built on the fly)")

    p = sub.add_parser("eval", help="metrics on a split")
    _common(p, checkpoint=True)
    p.add_argument("--split", choices=(TRAIN, TEST))
    p.add_argument("--stage", choices=("stage1", "stage2"))
    p.add_argument("--compare", action="store_true",
                   help="also score the phase-1 predictions of a stage-2 checkpoint")

    p = sub.add_parser("viz", help="cluster map of predicted expression")
    _common(p, checkpoint=True)
    p.add_argument("--split", choices=(TRAIN, TEST))
    p.add_argument("--slide", help="slide id (default: first slide of the split)")
    p.add_argument("--k", type=int, help="number of clusters")

    p = sub.add_parser("ablate", help="neighbor-count or aggregation ablation grid")
    _common(p, checkpoint=True)
    p.add_argument("--axis", required=True, choices=("neighbors", "aggregation"))
    p.add_argument("--split", choices=(TRAIN, TEST))
    return parser


def resolve_config(args, base=None):
    """Checkpoint snapshot (if any) < config file < shorthand flags < --set."""
    cfg = copy.deepcopy(base) if base is not None else load_config(None)
    explicit_ingest = False
    if args.config:
        load_config(args.config)  # validates sections and keys
        raw = _raw_sections(args.config)
        for section in raw:
            update_section(getattr(cfg, section), raw[section], section)
        explicit_ingest = "ingest" in raw
    for flag, (section, key) in SHORTHAND.items():
        value = getattr(args, flag, None)
        if value is not None:
            update_section(getattr(cfg, section), {key: value}, section)
            explicit_ingest |= section == "ingest"
    if args.seed is not None:
        cfg.train.seed = args.seed
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise MMAPError(f"bad --set value {item!r}; expected SECTION.KEY=VALUE")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if not hasattr(cfg, section):
            raise MMAPError(f"unknown config section {section!r}")
        update_section(getattr(cfg, section), {key: value}, section)
        explicit_ingest |= section == "ingest"
    if getattr(args, "data", None):
        cfg.data.root = str(Path(args.data).resolve())
    return cfg, explicit_ingest


def _raw_sections(path):
    import tomli
    return tomli.loads(Path(path).read_text())


def load_bundle(cfg, explicit_ingest):
    if not cfg.data.root:
        raise MMAPError("no dataset given; pass --data")
    root = Path(cfg.data.root)
    meta_path = root / "meta.json"
    if not explicit_ingest and meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        synth = meta.get("synthetic")
        if synth:
            sc = synth["config"]
            cfg.ingest = IngestConfig(n_hvg=sc["n_genes"], min_spots=0,
                                      patch_size=sc["patch_size"])
    return load_dataset(root, cfg.ingest)


class Run:
    """Output directory plus the manifest written beside the outputs."""

    def __init__(self, command, args, cfg, out):
        self.command, self.args, self.cfg = command, args, cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.outputs = []

    def path(self, name):
        self.outputs.append(name)
        return self.out / name

    def finish(self, extra=None):
        manifest = {
            "command": self.command,
            "argv": sys.argv[1:],
            "config_path": str(Path(self.args.config).resolve()) if self.args.config else None,
            "config": self.cfg.to_dict(),
            "seed": self.cfg.train.seed,
            "output_dir": str(self.out.resolve()),
            "outputs": self.outputs,
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        if extra:
            manifest.update(extra)
        (self.out / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _load_checkpoint(path):
    from .train import Checkpoint
    if not Path(path).is_file():
        raise MMAPError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def cmd_synth(args):
    cfg, _ = resolve_config(args)
    for name in ("n_slides", "spots_per_slide", "n_genes", "n_test_slides", "noise", "layout"):
        value = getattr(args, "synth_" + name)
        if value is not None:
            setattr(cfg.synth, name, value)
    if not args.out:
        raise MMAPError("synth needs --out")
    bundle = generate_synthetic(cfg.synth, cfg.train.seed)
    out = Path(args.out)
    write_dataset(bundle, out)
    run = Run("synth", args, cfg, out)
    run.outputs += ["slides/", "counts/", "spots/", "meta.json"]
    run.finish({"n_spots": bundle.n_spots, "n_genes": bundle.n_genes})
    print(f"wrote {len(bundle.slides)} slides, {bundle.n_spots} spots, "
          f"{bundle.n_genes} genes to {out}")


def cmd_ingest(args):
    cfg, explicit = resolve_config(args)
    t0 = time.perf_counter()
    bundle = load_bundle(cfg, explicit)
    run = Run("ingest", args, cfg, args.out or DEFAULT_OUT["ingest"])
    summary = dict(bundle.preprocessing_log)
    summary.pop("synthetic", None)
    summary.update({
        "n_train_slides": len(bundle.slide_ids(TRAIN)),
        "n_test_slides": len(bundle.slide_ids(TEST)),
        "slides": {s.slide_id: {"patient": s.patient_id, "split": s.split,
                                "n_spots": len(s.spots)} for s in bundle.slides},
        "seconds": round(time.perf_counter() - t0, 3),
    })
    run.path("ingest_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(run.path("genes.txt"), "w") as fh:
        fh.write("\n".join(bundle.gene_names) + "\n")
    run.finish()
    print(f"{summary['n_slides']} slides ({summary['n_train_slides']} train / "
          f"{summary['n_test_slides']} test), {summary['n_patients']} patients, "
          f"{bundle.n_spots} spots, {bundle.n_genes} genes")


def cmd_train1(args):
    from .plotting import loss_curve_figure, save_figure
    from .train import run_stage1
    cfg, explicit = resolve_config(args)
    bundle = load_bundle(cfg, explicit)
    run = Run("train1", args, cfg, args.out or DEFAULT_OUT["train1"])
    log_path = run.path("train_log.txt")
    log_path.unlink(missing_ok=True)
    ckpt = run_stage1(bundle, cfg, log_path=log_path)
    ckpt.save(run.path("model.ckpt"))
    save_figure(loss_curve_figure({"stage1": ckpt.history}), run.path("loss_curve.png"))
    run.finish()
    print(f"stage 1 done: final L_ge {ckpt.history[-1]['l_ge']:.5f} -> {run.out / 'model.ckpt'}")


def _checkpoint_and_config(args, default):
    ckpt = _load_checkpoint(args.checkpoint or default)
    cfg, explicit = resolve_config(args, ckpt.run_config())
    return ckpt, cfg, explicit


def cmd_bank(args):
    from .protobank import choose_prototype_count, save_banks
    from .train import build_banks, phase1_features
    ckpt, cfg, explicit = _checkpoint_and_config(args, DEFAULT_OUT["train1"] / "model.ckpt")
    bundle = load_bundle(cfg, explicit)
    table = spot_table(bundle, None)
    feats = phase1_features(ckpt.phase1_model(), table)
    banks = build_banks(table, feats["f"], cfg, cfg.train.seed)
    run = Run("bank", args, cfg, args.out or DEFAULT_OUT["bank"])
    save_banks(banks, run.out)
    run.outputs += [f"{sid}.bank" for sid in banks]
    with open(run.path("bank_summary.tsv"), "w") as fh:
        fh.write("slide_id\tn_spots\tK\tadaptive_L\n")
        for sid, bank in banks.items():
            fh.write(f"{sid}\t{int(bank.member_counts.sum())}\t{bank.K}\t"
                     f"{choose_prototype_count(bank.K)}\n")
    run.finish()
    print(f"built {len(banks)} banks in {run.out}")


def cmd_train2(args):
    from .plotting import loss_curve_figure, save_figure
    from .protobank import load_banks
    from .train import run_stage2
    ckpt, cfg, explicit = _checkpoint_and_config(args, DEFAULT_OUT["train1"] / "model.ckpt")
    if ckpt.stage != "stage1":
        raise MMAPError("train2 expects a stage-1 checkpoint")
    bundle = load_bundle(cfg, explicit)
    banks = None
    bank_dir = Path(args.banks) if args.banks else DEFAULT_OUT["bank"]
    if args.banks or bank_dir.is_dir():
        banks = load_banks(bank_dir)
    run = Run("train2", args, cfg, args.out or DEFAULT_OUT["train2"])
    log_path = run.path("train_log.txt")
    log_path.unlink(missing_ok=True)
    ckpt2 = run_stage2(bundle, ckpt, cfg, banks=banks, log_path=log_path)
    ckpt2.save(run.path("model.ckpt"))
    save_figure(loss_curve_figure({"stage1": ckpt.history, "stage2": ckpt2.history}),
                run.path("loss_curve.png"))
    run.finish()
    print(f"stage 2 done: final L_ge {ckpt2.history[-1]['l_ge']:.5f} -> {run.out / 'model.ckpt'}")


def cmd_eval(args):
    from .evaluate import evaluate_model
    ckpt, cfg, explicit = _checkpoint_and_config(args, DEFAULT_OUT["train2"] / "model.ckpt")
    bundle = load_bundle(cfg, explicit)
    split = args.split or cfg.eval.split
    run = Run("eval", args, cfg, args.out or DEFAULT_OUT["eval"])
    report = evaluate_model(ckpt, bundle, split, args.stage)
    report.write(run.path("metrics.json"))
    rows = [("stage2" if (args.stage or ckpt.stage) == "stage2" else "stage1", report)]
    if args.compare:
        if ckpt.stage != "stage2":
            raise MMAPError("--compare needs a stage-2 checkpoint")
        parent = evaluate_model(ckpt, bundle, split, "stage1")
        parent.write(run.path("metrics_stage1.json"))
        rows.append(("stage1", parent))
        _write_table(run.path("comparison.csv"),
                     [{"variant": n, "pcc_mean": r.pcc_mean, "mse": r.mse, "mae": r.mae}
                      for n, r in rows])
    run.finish()
    for name, r in rows:
        print(f"{name}: PCC {r.pcc_mean:.4f}  MSE {r.mse:.5f}  MAE {r.mae:.5f}  "
              f"({r.n_spots} spots, {r.n_genes} genes)")


def cmd_viz(args):
    from .evaluate import evaluate_model, render_cluster_map, write_labels
    ckpt, cfg, explicit = _checkpoint_and_config(args, DEFAULT_OUT["train2"] / "model.ckpt")
    bundle = load_bundle(cfg, explicit)
    split = args.split or cfg.eval.split
    _, pred, table = evaluate_model(ckpt, bundle, split, return_predictions=True)
    slide_id = args.slide or table.slide_ids[0]
    if slide_id not in table.slide_ids:
        raise MMAPError(f"slide {slide_id!r} not in the {split} split")
    k_index = table.slide_ids.index(slide_id)
    rows = table.slide_index == k_index
    run = Run("viz", args, cfg, args.out or DEFAULT_OUT["viz"])
    k = args.k or cfg.eval.cluster_k
    labels = render_cluster_map(pred[rows], table.centers[rows], k, cfg.train.seed,
                                run.path("cluster_map.png"), title=f"{slide_id} (k={k})",
                                image_hw=table.slide_shapes[k_index])
    write_labels(run.path("labels.tsv"), [s for s, r in zip(table.spot_ids, rows) if r], labels)
    run.finish({"slide_id": slide_id, "k": k})
    print(f"cluster map for {slide_id} -> {run.out / 'cluster_map.png'}")


def _write_table(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "pcc_mean", "mse", "mae"])
        for r in rows:
            writer.writerow([r["variant"], repr(float(r["pcc_mean"])), repr(float(r["mse"])),
                             repr(float(r["mae"]))])


def run_ablation(bundle, stage1, cfg, axis, split=TEST):
    """Train one stage-2 model per grid variant on a shared stage-1 model and banks."""
    from .evaluate import evaluate_model
    from .train import build_banks, phase1_features, run_stage2
    table = spot_table(bundle, None)
    feats = phase1_features(stage1.phase1_model(), table)
    banks = build_banks(table, feats["f"], cfg, cfg.train.seed)
    grid = NEIGHBOR_GRID if axis == "neighbors" else AGGREGATION_GRID
    rows = []
    for variant in grid:
        vcfg = copy.deepcopy(cfg)
        if axis == "neighbors":
            vcfg.bank.prototypes = variant
        else:
            vcfg.bank.aggregation = variant
        ckpt = run_stage2(bundle, stage1, vcfg, banks=banks)
        report = evaluate_model(ckpt, bundle, split)
        rows.append({"variant": variant, "pcc_mean": report.pcc_mean, "mse": report.mse,
                     "mae": report.mae})
        log.info("ablation %s=%s: pcc %.4f mse %.5f", axis, variant, report.pcc_mean, report.mse)
    return rows


def cmd_ablate(args):
    from .plotting import ablation_figure, save_figure
    from .train import run_stage1
    if args.checkpoint:
        stage1, cfg, explicit = _checkpoint_and_config(args, None)
        if stage1.stage != "stage1":
            raise MMAPError("ablate expects a stage-1 checkpoint")
    else:
        stage1, (cfg, explicit) = None, resolve_config(args)
    bundle = load_bundle(cfg, explicit)
    run = Run("ablate", args, cfg, args.out or RUNS / f"ablate_{args.axis}")
    if stage1 is None:
        stage1 = run_stage1(bundle, cfg)
        stage1.save(run.path("model.ckpt"))
    split = args.split or cfg.eval.split
    rows = run_ablation(bundle, stage1, cfg, args.axis, split)
    _write_table(run.path("ablation.csv"), rows)
    title = "neighbor count L" if args.axis == "neighbors" else "context aggregation"
    save_figure(ablation_figure(rows, title), run.path("ablation.png"))
    run.finish({"axis": args.axis, "split": split})
    for r in rows:
        print(f"{r['variant']:>15}  PCC {r['pcc_mean']:.4f}  MSE {r['mse']:.5f}  "
              f"MAE {r['mae']:.5f}")


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "train1": cmd_train1, "bank": cmd_bank,
    "train2": cmd_train2, "eval": cmd_eval, "viz": cmd_viz, "ablate": cmd_ablate,
}


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (MMAPError, FileNotFoundError, OSError) as exc:
        print(f"mmap-st {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
