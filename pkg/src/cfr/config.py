"""Experiment configuration: one JSON file, dotted --set overrides, per-stage
content hashes so stale artifacts are refused instead of silently reused."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .checkpoint import config_hash
from .grid import PERTURB_MODES
from .seg2d import Seg2DConfig
from .seg3d import Seg3DConfig
from .ssl import SSLConfig


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (CLI exit code 2)."""


class StageOrderError(RuntimeError):
    """Missing or mismatched upstream stage artifact (CLI exit code 3)."""


@dataclass
class DatasetBlock:
    dims: tuple[int, int, int] = (32, 32, 36)
    num_classes: int = 2
    n_train: int = 16
    n_test: int = 4
    m_labeled: int = 1
    seed: int = 0
    noise_sigma: float = 0.05

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        if len(self.dims) != 3:
            raise ConfigError(f"dims must have 3 entries, got {self.dims}")
        if self.m_labeled < 1 or self.m_labeled > self.n_train:
            raise ConfigError(
                f"m_labeled={self.m_labeled} must be in [1, n_train={self.n_train}]"
            )


@dataclass
class FinetuneBlock:
    lr: float = 1e-3
    perturb_mode: str | None = None
    perturb_seed: int = 0

    def __post_init__(self):
        if self.perturb_mode is not None and self.perturb_mode not in PERTURB_MODES:
            raise ConfigError(f"unknown perturb_mode {self.perturb_mode!r}")


@dataclass
class ExperimentConfig:
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    seg2d: Seg2DConfig = field(default_factory=Seg2DConfig)
    seg3d: Seg3DConfig = field(default_factory=Seg3DConfig)
    lora_rank: int = 4
    ssl: SSLConfig = field(default_factory=SSLConfig)
    finetune: FinetuneBlock = field(default_factory=FinetuneBlock)
    output_dir: str = "runs/exp"

    def __post_init__(self):
        # cross-block consistency: one K everywhere, rank mirrored into seg2d
        if self.seg2d.num_classes != self.dataset.num_classes:
            raise ConfigError(
                f"seg2d.num_classes={self.seg2d.num_classes} disagrees with "
                f"dataset.num_classes={self.dataset.num_classes}"
            )
        if self.seg3d.num_classes != self.dataset.num_classes:
            raise ConfigError(
                f"seg3d.num_classes={self.seg3d.num_classes} disagrees with "
                f"dataset.num_classes={self.dataset.num_classes}"
            )
        if self.seg2d.lora_rank != self.lora_rank:
            raise ConfigError(
                f"seg2d.lora_rank={self.seg2d.lora_rank} disagrees with "
                f"lora_rank={self.lora_rank}"
            )

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["dataset"]["dims"] = list(self.dataset.dims)
        return doc


def _merged(defaults: dict, given: dict, context: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


def experiment_config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    lora = doc.pop("lora", {})
    rank = int(lora.get("rank", 4)) if isinstance(lora, dict) else int(lora)
    output_dir = doc.pop("output_dir", "runs/exp")
    known = {"dataset", "seg2d", "seg3d", "ssl", "finetune"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config blocks: {sorted(unknown)}")
    try:
        dataset = DatasetBlock(**_merged(asdict(DatasetBlock()), doc.get("dataset", {}), "dataset"))
        seg2d_kwargs = _merged(asdict(Seg2DConfig()), doc.get("seg2d", {}), "seg2d")
        seg2d_kwargs["num_classes"] = dataset.num_classes
        seg2d_kwargs["lora_rank"] = rank
        seg3d_kwargs = _merged(asdict(Seg3DConfig()), doc.get("seg3d", {}), "seg3d")
        seg3d_kwargs["num_classes"] = dataset.num_classes
        return ExperimentConfig(
            dataset=dataset,
            seg2d=Seg2DConfig(**seg2d_kwargs),
            seg3d=Seg3DConfig(**seg3d_kwargs),
            lora_rank=rank,
            ssl=SSLConfig(**_merged(asdict(SSLConfig()), doc.get("ssl", {}), "ssl")),
            finetune=FinetuneBlock(**_merged(asdict(FinetuneBlock()), doc.get("finetune", {}), "finetune")),
            output_dir=str(output_dir),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply --set key.path=value pairs; values parse as JSON, else strings."""
    doc = json.loads(json.dumps(doc))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {key!r}")
        node[parts[-1]] = value
    return doc


def load_experiment_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if overrides:
        doc = apply_overrides(doc, overrides)
    return experiment_config_from_dict(doc)


# ---------------------------------------------------------------------------
# per-stage content addressing

def _finetune_inputs(cfg: ExperimentConfig) -> dict:
    return {
        "dataset": asdict(cfg.dataset),
        "seg2d": asdict(cfg.seg2d),
        "lora_rank": cfg.lora_rank,
        "finetune": asdict(cfg.finetune),
        "finetune_epochs": cfg.ssl.finetune_epochs,
    }


def stage_hash(stage: str, cfg: ExperimentConfig) -> str:
    if stage == "gen":
        payload = {"dataset": asdict(cfg.dataset)}
    elif stage == "finetune":
        payload = _finetune_inputs(cfg)
    elif stage == "pseudolabel":
        payload = _finetune_inputs(cfg)
    elif stage == "retrain":
        payload = {
            "dataset": asdict(cfg.dataset),
            "seg3d": asdict(cfg.seg3d),
            "ssl": asdict(cfg.ssl),
            "pseudo_upstream": _finetune_inputs(cfg) if cfg.ssl.use_pseudo_labels else None,
        }
    else:
        raise ValueError(f"unknown stage {stage!r}")
    payload["dataset"]["dims"] = list(cfg.dataset.dims)
    return config_hash(payload)


def write_stage_meta(out_dir, stage: str, cfg: ExperimentConfig, **extra) -> None:
    meta = {"stage": stage, "config_hash": stage_hash(stage, cfg)}
    meta.update(extra)
    (Path(out_dir) / f"{stage}.meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )


def check_stage_meta(out_dir, stage: str, cfg: ExperimentConfig) -> dict:
    """Verify an upstream stage ran with a config matching the current one."""
    path = Path(out_dir) / f"{stage}.meta.json"
    if not path.exists():
        raise StageOrderError(
            f"stage {stage!r} has not been run in {out_dir} (missing {path.name})"
        )
    meta = json.loads(path.read_text())
    expected = stage_hash(stage, cfg)
    if meta.get("config_hash") != expected:
        raise StageOrderError(
            f"stage {stage!r} artifact in {out_dir} was produced by a different "
            f"config (hash {meta.get('config_hash')} != {expected}); re-run it"
        )
    return meta
