"""Semi-supervised re-training of the 3D segmenter.

Per step the objective is L_sup + lambda(t) * (L_uns_rt + L_pl): a supervised
Dice+CE term on the labeled batch, a method-specific consistency term
(self-training against a frozen snapshot, mean-teacher against an EMA copy, or
a registered plugin), and a pseudo-label guidance term on the unlabeled batch.
lambda follows the usual Gaussian warmup.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .losses import dice_ce_loss
from .seg3d import Seg3D, Seg3DConfig, build_seg3d
from .volume_io import (
    SPLIT_LABELED,
    SPLIT_TEST,
    SPLIT_UNLABELED,
    DatasetManifest,
    LabelVolume,
    Volume3D,
    read_volume,
)

log = logging.getLogger(__name__)

METHOD_SUPERVISED = "supervised"
METHOD_SELF_TRAINING = "self_training"
METHOD_MEAN_TEACHER = "mean_teacher"
_BUILTIN_METHODS = (METHOD_SUPERVISED, METHOD_SELF_TRAINING, METHOD_MEAN_TEACHER)


class TrainingError(RuntimeError):
    """Raised on non-finite losses or unusable training configuration."""


@dataclass
class SSLConfig:
    method: str = METHOD_MEAN_TEACHER      # supervised | self_training | mean_teacher | plugin:<name>
    lambda_max: float = 0.1
    ramp_len: int = 40
    ema_decay: float = 0.99
    epochs: int = 60
    finetune_epochs: int = 200
    teacher_refresh: int = 20               # self-training snapshot period (epochs)
    noise_std: float = 0.1                  # input perturbation for consistency
    use_pseudo_labels: bool = True
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.lambda_max < 0:
            raise ValueError(f"lambda_max must be >= 0, got {self.lambda_max}")
        if self.method not in _BUILTIN_METHODS and not self.method.startswith("plugin:"):
            raise ValueError(f"unknown SSL method {self.method!r}")
        if self.teacher_refresh < 1:
            raise ValueError(f"teacher_refresh must be >= 1, got {self.teacher_refresh}")


@dataclass
class TeacherStudent:
    student: Seg3D
    teacher: Seg3D


@dataclass
class StepBatch:
    """Everything one training step sees; handed to unsupervised plugins."""

    x_labeled: torch.Tensor        # (1, 1, H, W, D)
    y_labeled: torch.Tensor        # (H, W, D) long
    x_unlabeled: torch.Tensor | None
    pseudo: torch.Tensor | None    # (H, W, D) long
    noise_std: float
    generator: torch.Generator
    epoch: int
    step: int


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss_sup: float
    loss_uns_rt: float
    loss_pl: float
    lam: float
    loss_total: float


@dataclass
class EpochRecord:
    epoch: int
    loss_sup: float
    loss_uns_rt: float
    loss_pl: float
    lam: float
    val_dice: float


@dataclass
class TrainTrace:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)


def lambda_schedule(epoch: int, lambda_max: float, ramp_len: int) -> float:
    """Gaussian warmup: lambda_max * exp(-5 (1 - t/ramp)^2), flat afterwards."""
    if lambda_max == 0.0:
        return 0.0
    if ramp_len <= 0 or epoch >= ramp_len:
        return lambda_max
    frac = max(0.0, min(1.0, epoch / ramp_len))
    return lambda_max * math.exp(-5.0 * (1.0 - frac) ** 2)


def ema_update(teacher: Seg3D, student: Seg3D, decay: float) -> None:
    """Elementwise teacher <- decay * teacher + (1 - decay) * student."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    t_params = list(teacher.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params):
        raise ValueError("teacher/student architectures differ")
    with torch.no_grad():
        for t, s in zip(t_params, s_params):
            if t.shape != s.shape:
                raise ValueError(
                    f"parameter shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}"
                )
            t.mul_(decay).add_(s, alpha=1.0 - decay)


def consistency_mse(
    ts: TeacherStudent,
    xs: list[torch.Tensor],
    noise_std: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """MSE between student and teacher softmaxes under independent input noise.

    All volumes in `xs` are stacked into one batch; the teacher's noise is
    drawn first, then the student's. No gradient flows through the teacher.
    """
    x = torch.cat(xs, dim=0)
    xi_t = torch.zeros_like(x)
    xi_s = torch.zeros_like(x)
    if noise_std > 0:
        xi_t.normal_(0.0, noise_std, generator=generator)
        xi_s.normal_(0.0, noise_std, generator=generator)
    with torch.no_grad():
        p_teacher = F.softmax(ts.teacher(x + xi_t), dim=1)
    p_student = F.softmax(ts.student(x + xi_s), dim=1)
    return ((p_student - p_teacher) ** 2).mean()


def uns_meanteacher(
    ts: TeacherStudent,
    x: torch.Tensor,
    noise_std: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean-teacher consistency for a single (labeled or unlabeled) volume."""
    return consistency_mse(ts, [x], noise_std, generator)


def uns_selftrain(teacher: Seg3D, student: Seg3D, x_u: torch.Tensor) -> torch.Tensor:
    """Dice+CE of the student against the frozen teacher's hard prediction."""
    with torch.no_grad():
        hard = teacher(x_u).argmax(dim=1)
    return dice_ce_loss(student(x_u)[0], hard[0])


# ---------------------------------------------------------------------------
# plugin seam for external unsupervised losses (ambiguity-masked consistency,
# cube-shuffling objectives, ...). A plugin runs in the mean-teacher harness:
# EMA teacher updates happen after every step exactly as for mean_teacher.

_PLUGINS: dict[str, Callable[[TeacherStudent, StepBatch], torch.Tensor]] = {}


def register_unsup_plugin(
    name: str, fn: Callable[[TeacherStudent, StepBatch], torch.Tensor]
) -> None:
    if name in _PLUGINS:
        raise ValueError(f"plugin {name!r} already registered")
    _PLUGINS[name] = fn


def unregister_unsup_plugin(name: str) -> None:
    _PLUGINS.pop(name, None)


def _resolve_method(method: str):
    if method.startswith("plugin:"):
        name = method.split(":", 1)[1]
        if name not in _PLUGINS:
            raise TrainingError(f"no unsupervised plugin registered as {name!r}")
        return _PLUGINS[name]
    return None


def _derive_seed(seed: int, salt: int) -> int:
    return (int(seed) * 0x9E3779B97F4A7C15 + salt) & 0x7FFFFFFFFFFFFFFF


def _to_input(vol: Volume3D) -> torch.Tensor:
    return torch.from_numpy(vol.data)[None, None]


def _forward_pair(
    model: Seg3D, x_a: torch.Tensor, x_b: torch.Tensor | None
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Forward two volumes as one batch; duplicates x_a when x_b is absent.

    Batch-1 conv3d takes a slow path on CPU, several times slower per sample
    than batch-2, and the per-sample outputs are independent of the other
    batch element, so single-volume forwards ride along as a duplicated pair.
    """
    if x_b is None:
        return model(torch.cat([x_a, x_a], dim=0))[0], None
    out = model(torch.cat([x_a, x_b], dim=0))
    return out[0], out[1]


def _to_target(lab: LabelVolume) -> torch.Tensor:
    return torch.from_numpy(lab.data.astype(np.int64))


def _mean_foreground_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    scores = []
    for cls in range(1, num_classes):
        p = pred == cls
        g = gt == cls
        np_, ng = int(p.sum()), int(g.sum())
        if np_ == 0 and ng == 0:
            scores.append(1.0)
            continue
        inter = int((p & g).sum())
        scores.append(2.0 * inter / (np_ + ng))
    return float(np.mean(scores))


def train_ssl(
    seg3d_cfg: Seg3DConfig,
    ssl_cfg: SSLConfig,
    manifest: DatasetManifest,
    pseudo_labels: dict[str, LabelVolume] | None = None,
) -> tuple[Seg3D, TrainTrace]:
    """Train the 3D student on labeled + pseudo-labeled + consistency signals.

    One step consumes one labeled and (when available) one unlabeled volume;
    an epoch cycles the unlabeled pool once. Ground-truth labels of unlabeled
    entries are never read. Returns the student (the inference model) and the
    per-step / per-epoch trace.
    """
    labeled = manifest.by_split(SPLIT_LABELED)
    unlabeled = manifest.by_split(SPLIT_UNLABELED)
    test = manifest.by_split(SPLIT_TEST)
    m, n = len(labeled), len(unlabeled)
    if m < 1:
        raise TrainingError("need at least one labeled volume")

    plugin = _resolve_method(ssl_cfg.method)
    uses_unlabeled = (
        ssl_cfg.method != METHOD_SUPERVISED and n > 0 and ssl_cfg.lambda_max > 0
    )
    need_pl = ssl_cfg.use_pseudo_labels and uses_unlabeled
    if need_pl:
        pseudo_labels = pseudo_labels or {}
        missing = [e.image for e in unlabeled if e.image not in pseudo_labels]
        if missing:
            raise TrainingError(f"missing pseudo-labels for {missing}")

    x_l = [_to_input(read_volume(manifest.resolve(e.image))) for e in labeled]
    y_l = [_to_target(read_volume(manifest.resolve(e.label))) for e in labeled]
    x_u = [_to_input(read_volume(manifest.resolve(e.image))) for e in unlabeled]
    pl = [_to_target(pseudo_labels[e.image]) for e in unlabeled] if need_pl else None
    x_test = [_to_input(read_volume(manifest.resolve(e.image))) for e in test]
    y_test = [read_volume(manifest.resolve(e.label)).data for e in test]

    student = build_seg3d(seg3d_cfg)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    ts = TeacherStudent(student=student, teacher=teacher)

    optimizer = torch.optim.SGD(
        student.parameters(), lr=ssl_cfg.lr, momentum=ssl_cfg.momentum
    )
    data_gen = torch.Generator().manual_seed(_derive_seed(ssl_cfg.seed, 0x1))
    noise_gen = torch.Generator().manual_seed(_derive_seed(ssl_cfg.seed, 0x2))

    steps_per_epoch = n if n > 0 else m
    trace = TrainTrace()
    mt_like = ssl_cfg.method == METHOD_MEAN_TEACHER or plugin is not None

    for epoch in range(ssl_cfg.epochs):
        lam = lambda_schedule(epoch, ssl_cfg.lambda_max, ssl_cfg.ramp_len)
        if (
            ssl_cfg.method == METHOD_SELF_TRAINING
            and epoch % ssl_cfg.teacher_refresh == 0
        ):
            teacher.load_state_dict(student.state_dict())
        # index draws happen unconditionally so the data stream is identical
        # across methods and lambda settings
        lab_idx = torch.randint(m, (steps_per_epoch,), generator=data_gen)
        unlab_idx = torch.randperm(n, generator=data_gen) if n > 0 else None

        sums = {"sup": 0.0, "uns": 0.0, "pl": 0.0}
        for step in range(steps_per_epoch):
            li = int(lab_idx[step])
            ui = int(unlab_idx[step]) if n > 0 else None
            use_unlab = lam > 0 and uses_unlabeled
            logits_l, logits_u = _forward_pair(
                student, x_l[li], x_u[ui] if use_unlab else None
            )
            loss_sup = dice_ce_loss(logits_l, y_l[li])

            loss_uns = logits_l.new_zeros(())
            loss_pl = logits_l.new_zeros(())
            if use_unlab:
                batch = StepBatch(
                    x_labeled=x_l[li],
                    y_labeled=y_l[li],
                    x_unlabeled=x_u[ui],
                    pseudo=pl[ui] if need_pl else None,
                    noise_std=ssl_cfg.noise_std,
                    generator=noise_gen,
                    epoch=epoch,
                    step=step,
                )
                if ssl_cfg.method == METHOD_MEAN_TEACHER:
                    loss_uns = consistency_mse(
                        ts, [x_l[li], x_u[ui]], ssl_cfg.noise_std, noise_gen
                    )
                elif ssl_cfg.method == METHOD_SELF_TRAINING:
                    with torch.no_grad():
                        hard, _ = _forward_pair(teacher, x_u[ui], None)
                        hard = hard.argmax(dim=0)
                    loss_uns = dice_ce_loss(logits_u, hard)
                else:
                    loss_uns = plugin(ts, batch)
                if need_pl:
                    loss_pl = dice_ce_loss(logits_u, pl[ui])

            total = loss_sup + lam * (loss_uns + loss_pl)
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"sup={float(loss_sup.detach())}, uns={float(loss_uns.detach())}, "
                    f"pl={float(loss_pl.detach())}"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            if mt_like:
                ema_update(teacher, student, ssl_cfg.ema_decay)

            rec = StepRecord(
                epoch=epoch,
                step=step,
                loss_sup=float(loss_sup.detach()),
                loss_uns_rt=float(loss_uns.detach()),
                loss_pl=float(loss_pl.detach()),
                lam=lam,
                loss_total=float(total.detach()),
            )
            trace.steps.append(rec)
            sums["sup"] += rec.loss_sup
            sums["uns"] += rec.loss_uns_rt
            sums["pl"] += rec.loss_pl

        val_dice = float("nan")
        if x_test:
            with torch.no_grad():
                stacked = torch.cat(x_test * 2 if len(x_test) == 1 else x_test, dim=0)
                preds = student(stacked).argmax(dim=1).numpy()[: len(x_test)]
            val_dice = float(
                np.mean(
                    [
                        _mean_foreground_dice(p, g, manifest.num_classes)
                        for p, g in zip(preds, y_test)
                    ]
                )
            )
        trace.epochs.append(
            EpochRecord(
                epoch=epoch,
                loss_sup=sums["sup"] / steps_per_epoch,
                loss_uns_rt=sums["uns"] / steps_per_epoch,
                loss_pl=sums["pl"] / steps_per_epoch,
                lam=lam,
                val_dice=val_dice,
            )
        )
        log.info(
            "epoch %d: sup=%.4f uns=%.4f pl=%.4f lam=%.4f val_dice=%.4f",
            epoch,
            sums["sup"] / steps_per_epoch,
            sums["uns"] / steps_per_epoch,
            sums["pl"] / steps_per_epoch,
            lam,
            val_dice,
        )

    student.eval()
    return student, trace


def write_trace_csv(trace: TrainTrace, path) -> None:
    """Per-epoch trace: epoch, L_sup, L_uns_rt, L_pl, lambda, val_dice."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_sup", "loss_uns_rt", "loss_pl", "lambda", "val_dice"])
        for e in trace.epochs:
            writer.writerow(
                [e.epoch, repr(e.loss_sup), repr(e.loss_uns_rt), repr(e.loss_pl),
                 repr(e.lam), repr(e.val_dice)]
            )


def write_step_trace_csv(trace: TrainTrace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "step", "loss_sup", "loss_uns_rt", "loss_pl", "lambda", "loss_total"]
        )
        for s in trace.steps:
            writer.writerow(
                [s.epoch, s.step, repr(s.loss_sup), repr(s.loss_uns_rt),
                 repr(s.loss_pl), repr(s.lam), repr(s.loss_total)]
            )
