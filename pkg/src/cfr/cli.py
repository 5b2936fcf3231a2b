"""Stage-per-subcommand pipeline driver.

    cfr gen|finetune|pseudolabel|retrain|eval|report --config cfg.json \
        [--set key.path=value ...] [--out dir]

Stages consume the previous stage's artifacts from the run directory and
refuse to run on artifacts produced under a different config (content hash
check). Exit codes: 0 ok, 2 config error, 3 stage-order error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import grid as gridmod
from . import metrics as metricsmod
from .checkpoint import file_hash, load_checkpoint
from .config import (
    ConfigError,
    ExperimentConfig,
    StageOrderError,
    check_stage_meta,
    load_experiment_config,
    write_stage_meta,
)
from .pseudo_label import load_pseudo_cache, pseudo_label, write_pseudo_cache
from .seg2d import FinetuneConfig, build_seg2d, finetune, save_seg2d, seg2d_from_checkpoint
from .seg3d import predict_volume, save_seg3d, seg3d_from_checkpoint
from .ssl import train_ssl, write_step_trace_csv, write_trace_csv
from .volume_io import (
    SPLIT_LABELED,
    SPLIT_TEST,
    DatasetManifest,
    LabelVolume,
    Volume3D,
    generate_dataset,
    load_manifest,
    read_volume,
)

log = logging.getLogger(__name__)


def _load_run_manifest(out_dir: Path) -> DatasetManifest:
    path = out_dir / "manifest.json"
    if not path.exists():
        raise StageOrderError(f"no dataset in {out_dir}; run `cfr gen` first")
    return load_manifest(path)


def cmd_gen(cfg: ExperimentConfig, out_dir: Path) -> None:
    ds = cfg.dataset
    generate_dataset(
        out_dir,
        dims=ds.dims,
        num_classes=ds.num_classes,
        n_train=ds.n_train,
        n_test=ds.n_test,
        m_labeled=ds.m_labeled,
        seed=ds.seed,
        noise_sigma=ds.noise_sigma,
    )
    write_stage_meta(out_dir, "gen", cfg)
    log.info("generated %d train + %d test phantoms in %s", ds.n_train, ds.n_test, out_dir)


def _labeled_pairs(manifest: DatasetManifest) -> list[tuple[Volume3D, LabelVolume]]:
    pairs = []
    for e in manifest.by_split(SPLIT_LABELED):
        pairs.append(
            (read_volume(manifest.resolve(e.image)), read_volume(manifest.resolve(e.label)))
        )
    return pairs


def _pair_to_grids(vol: Volume3D, lab: LabelVolume, input_size: int):
    layout = gridmod.grid_layout(*vol.dims)
    img = gridmod.resize_grid(gridmod.concatenate(vol, layout), input_size).data
    tgt = gridmod.resize_grid(gridmod.concatenate(lab, layout), input_size).data
    return img, tgt


def cmd_finetune(cfg: ExperimentConfig, out_dir: Path) -> None:
    check_stage_meta(out_dir, "gen", cfg)
    manifest = _load_run_manifest(out_dir)
    pairs = _labeled_pairs(manifest)
    model = build_seg2d(cfg.seg2d)
    opt_cfg = FinetuneConfig(lr=cfg.finetune.lr)

    grid_fn = None
    if cfg.finetune.perturb_mode is not None:
        mode, base = cfg.finetune.perturb_mode, cfg.finetune.perturb_seed

        def grid_fn(epoch: int):
            out = []
            for i, (vol, lab) in enumerate(pairs):
                seed = base * 1_000_003 + epoch * 131 + i
                extra = None
                if mode == "mix_natural":
                    h, w, depth = vol.dims
                    count = max(2, depth // 4)
                    extra = {
                        "count": count,
                        "images": gridmod.synthetic_natural_images(count, h, w, seed + 7),
                    }
                pvol, plab = gridmod.perturb_pair(vol, lab, mode, seed, extra)
                out.append(_pair_to_grids(pvol, plab, cfg.seg2d.input_size))
            return out

    static = [_pair_to_grids(v, l, cfg.seg2d.input_size) for v, l in pairs]
    model, trace = finetune(
        model, static, cfg.ssl.finetune_epochs, opt_cfg, grid_fn=grid_fn
    )
    save_seg2d(model, out_dir / "seg2d.cfrc")
    with (out_dir / "finetune_trace.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_ft"])
        for i, v in enumerate(trace):
            writer.writerow([i, repr(v)])
    write_stage_meta(out_dir, "finetune", cfg, checkpoint="seg2d.cfrc")
    log.info("fine-tuning done; checkpoint at %s", out_dir / "seg2d.cfrc")


def cmd_pseudolabel(cfg: ExperimentConfig, out_dir: Path) -> None:
    check_stage_meta(out_dir, "finetune", cfg)
    ckpt_path = out_dir / "seg2d.cfrc"
    if not ckpt_path.exists():
        raise StageOrderError(f"missing checkpoint {ckpt_path}; run `cfr finetune`")
    model = seg2d_from_checkpoint(load_checkpoint(ckpt_path))
    manifest = _load_run_manifest(out_dir)
    write_pseudo_cache(model, manifest, out_dir / "pseudo", checkpoint_path=ckpt_path)
    write_stage_meta(out_dir, "pseudolabel", cfg, checkpoint_hash=file_hash(ckpt_path))


def cmd_retrain(cfg: ExperimentConfig, out_dir: Path) -> None:
    check_stage_meta(out_dir, "gen", cfg)
    manifest = _load_run_manifest(out_dir)
    pseudo = None
    uses_unlabeled = cfg.ssl.method != "supervised" and cfg.ssl.lambda_max > 0
    if cfg.ssl.use_pseudo_labels and uses_unlabeled:
        check_stage_meta(out_dir, "pseudolabel", cfg)
        pseudo = load_pseudo_cache(out_dir / "pseudo")
    student, trace = train_ssl(cfg.seg3d, cfg.ssl, manifest, pseudo)
    save_seg3d(student, out_dir / "seg3d.cfrc")
    write_trace_csv(trace, out_dir / "trace.csv")
    write_step_trace_csv(trace, out_dir / "trace_steps.csv")
    write_stage_meta(out_dir, "retrain", cfg, checkpoint="seg3d.cfrc")
    log.info("re-training done; checkpoint at %s", out_dir / "seg3d.cfrc")


def _predict_for_checkpoint(ckpt_path: Path, vol: Volume3D) -> LabelVolume:
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.kind == "seg3d":
        return predict_volume(seg3d_from_checkpoint(ckpt), vol)
    if ckpt.kind == "seg2d":
        return pseudo_label(seg2d_from_checkpoint(ckpt), vol)
    raise ConfigError(f"cannot evaluate checkpoint kind {ckpt.kind!r}")


def cmd_eval(cfg: ExperimentConfig, out_dir: Path, checkpoint: str | None = None) -> None:
    manifest = _load_run_manifest(out_dir)
    ckpt_path = Path(checkpoint) if checkpoint else out_dir / "seg3d.cfrc"
    if not ckpt_path.exists():
        raise StageOrderError(f"missing checkpoint {ckpt_path}; run `cfr retrain`")
    ckpt = load_checkpoint(ckpt_path)
    model = (
        seg3d_from_checkpoint(ckpt) if ckpt.kind == "seg3d" else seg2d_from_checkpoint(ckpt)
    )
    predict = predict_volume if ckpt.kind == "seg3d" else pseudo_label

    rows = []
    per_volume = {}
    for e in manifest.by_split(SPLIT_TEST):
        vol = read_volume(manifest.resolve(e.image))
        gt = read_volume(manifest.resolve(e.label))
        pred = predict(model, vol)
        record = metricsmod.evaluate(pred, gt)
        per_volume[e.image] = record.to_dict()
        for cls, cm in record.per_class.items():
            rows.append(
                [e.image, cls, cm.dice, cm.jaccard, cm.asd, cm.hd95, cm.distances_defined]
            )

    with (out_dir / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["volume", "class", "dice", "jaccard", "asd", "hd95", "distances_defined"])
        writer.writerows(rows)

    def _vol_mean(key):
        vals = np.array([v["mean"][key] for v in per_volume.values()], dtype=float)
        finite = vals[np.isfinite(vals)]
        return float(finite.mean()) if finite.size else float("nan")

    summary = {
        "checkpoint": str(ckpt_path.name),
        "kind": ckpt.kind,
        "dice": _vol_mean("dice"),
        "jaccard": _vol_mean("jaccard"),
        "asd": _vol_mean("asd"),
        "hd95": _vol_mean("hd95"),
    }
    (out_dir / "metrics.json").write_text(
        json.dumps({"summary": summary, "volumes": per_volume}, indent=2, sort_keys=True)
        + "\n"
    )
    log.info(
        "eval %s: dice=%.2f jaccard=%.2f asd=%.3f hd95=%.3f",
        ckpt_path.name, summary["dice"], summary["jaccard"], summary["asd"], summary["hd95"],
    )


def _read_trace(path: Path) -> dict[str, list[float]]:
    cols: dict[str, list[float]] = {}
    with path.open() as fh:
        for row in csv.DictReader(fh):
            for key, val in row.items():
                cols.setdefault(key, []).append(float(val))
    return cols


def cmd_report(out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = []
    for candidate in [out_dir] + sorted(p for p in out_dir.iterdir() if p.is_dir()):
        if (candidate / "metrics.json").exists():
            doc = json.loads((candidate / "metrics.json").read_text())
            name = candidate.name if candidate != out_dir else out_dir.name
            runs.append((name, candidate, doc["summary"]))
    if not runs:
        raise StageOrderError(f"no metrics.json under {out_dir}; run `cfr eval` first")

    lines = [
        "# CFR run report",
        "",
        "| run | model | Dice (%) | Jaccard (%) | ASD (voxel) | 95HD (voxel) |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for name, _, s in runs:
        lines.append(
            f"| {name} | {s['kind']} | {s['dice']:.2f} | {s['jaccard']:.2f} "
            f"| {s['asd']:.3f} | {s['hd95']:.3f} |"
        )

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    plotted = False
    for name, run_dir, _ in runs:
        trace_path = run_dir / "trace.csv"
        if not trace_path.exists():
            continue
        cols = _read_trace(trace_path)
        axes[0].plot(cols["epoch"], cols["loss_sup"], label=name)
        axes[1].plot(cols["epoch"], cols["val_dice"], label=name)
        plotted = True
    if plotted:
        axes[0].set_xlabel("epoch"), axes[0].set_ylabel("supervised loss")
        axes[1].set_xlabel("epoch"), axes[1].set_ylabel("test dice (fraction)")
        for ax in axes:
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out_dir / "report_curves.png", dpi=120)
        lines += ["", "![training curves](report_curves.png)"]
    plt.close(fig)

    (out_dir / "report.md").write_text("\n".join(lines) + "\n")
    log.info("wrote %s", out_dir / "report.md")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfr", description=__doc__)
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in ("gen", "finetune", "pseudolabel", "retrain", "eval", "report"):
        p = sub.add_parser(stage)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config field, e.g. --set ssl.lambda_max=0",
        )
        p.add_argument("--out", help="run directory (default: config output_dir)")
        if stage == "eval":
            p.add_argument("--checkpoint", help="checkpoint to evaluate (default seg3d.cfrc)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.stage == "report":
            if not args.out:
                raise ConfigError("report needs --out pointing at a run directory")
            cmd_report(Path(args.out))
            return 0
        if not args.config:
            raise ConfigError(f"stage {args.stage!r} needs --config")
        cfg = load_experiment_config(args.config, args.overrides)
        out_dir = Path(args.out) if args.out else Path(cfg.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.stage == "gen":
            cmd_gen(cfg, out_dir)
        elif args.stage == "finetune":
            cmd_finetune(cfg, out_dir)
        elif args.stage == "pseudolabel":
            cmd_pseudolabel(cfg, out_dir)
        elif args.stage == "retrain":
            cmd_retrain(cfg, out_dir)
        elif args.stage == "eval":
            cmd_eval(cfg, out_dir, args.checkpoint)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageOrderError as exc:
        print(f"stage-order error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
