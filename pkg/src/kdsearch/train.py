"""Teacher pre-training, joint student training with distillation, and ablations."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import losses
from .augment import ShiftedProposal, fsa_shift, isa_crop_range, isa_expand_and_crop
from .data import Dataset, SplitSpec, crop_patch
from .metrics import MetricsReport, evaluate_search
from .models import (
    SGD,
    StudentModel,
    TeacherModel,
    backward,
    detection_loss,
    detection_targets,
    student_forward,
    teacher_forward,
)
from .types import AugConfig, LossConfig, Rng, boxes_to_array

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iterations: int = 1000
    batch_size: int = 4
    decay_at: float = 0.6
    decay: float = 0.1
    warmup: int = 50

    def lr_at(self, it: int) -> float:
        lr = self.lr * (self.decay if it >= int(self.decay_at * self.iterations) else 1.0)
        if it < self.warmup:
            lr *= (it + 1) / self.warmup
        return lr


@dataclass(frozen=True)
class TeacherConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 64
    decay_at: float = 0.6
    decay: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    split: SplitSpec = field(default_factory=SplitSpec)
    # raw-embedding triplet KD collapses the shared trunk at desk scale
    loss: LossConfig = field(default_factory=lambda: LossConfig(normalize_triplet=True))
    aug: AugConfig = field(default_factory=AugConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    use_lp: bool = False
    use_lpr: bool = False
    use_ltr: bool = False
    use_isa: bool = False
    use_fsa: bool = False
    dim: int = 32
    seed: int = 0

    @property
    def uses_teacher(self) -> bool:
        return self.use_lp or self.use_lpr or self.use_ltr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        sub = {"split": SplitSpec, "loss": LossConfig, "aug": AugConfig, "optim": OptimConfig, "teacher": TeacherConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in sub:
                try:
                    v = sub[k](**v)
                except TypeError as e:
                    raise ConfigError(f"bad '{k}' section: {e}") from None
            kw[k] = v
        return cls(**kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# Table rows: (use_lp, use_lpr, use_ltr, use_isa, use_fsa). ISA describes the teacher.
ABLATIONS = {
    "Ours-0": (False, False, False, False, False),
    "Ours-1": (True, False, False, False, False),
    "Ours-2": (True, False, False, True, False),
    "Ours-3": (True, False, False, True, True),
    "Ours-4": (False, True, False, True, False),
    "Ours-5": (False, False, True, True, False),
    "Ours-6": (False, True, True, True, False),
    "Ours-7": (True, True, False, True, True),
    "Ours-8": (True, False, True, True, True),
    "Ours": (True, True, True, True, True),
}
KD_ROWS = ("Ours-0", "Ours-4", "Ours-5", "Ours-6", "Ours-7", "Ours-8", "Ours")
AUG_ROWS = ("Ours-0", "Ours-1", "Ours-2", "Ours-3")


def preset(name: str, base: Optional[ExperimentConfig] = None, **overrides) -> ExperimentConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation row {name!r}; choose from {list(ABLATIONS)}")
    lp, lpr, ltr, isa, fsa = ABLATIONS[name]
    return replace(base or ExperimentConfig(), use_lp=lp, use_lpr=lpr, use_ltr=ltr,
                   use_isa=isa, use_fsa=fsa, **overrides)


def row_name(cfg: ExperimentConfig) -> str:
    flags = (cfg.use_lp, cfg.use_lpr, cfg.use_ltr, cfg.use_isa, cfg.use_fsa)
    for name, f in ABLATIONS.items():
        if f == flags:
            return name
    return "custom"


# --- teacher ------------------------------------------------------------------------


def _labeled_samples(scenes):
    return [(s, b) for s in scenes for b in s.labeled]


def train_teacher(ds: Dataset, aug: str = "none", cfg: Optional[ExperimentConfig] = None, seed: int = 0):
    """Train the external Re-ID model on ground-truth (``none``) or ISA (``isa``) patches.

    Returns the model and the per-epoch mean cross-entropy.
    """
    if aug not in ("none", "isa"):
        raise ConfigError(f"teacher augmentation must be 'none' or 'isa', got {aug!r}")
    cfg = cfg or ExperimentConfig()
    tc, ac = cfg.teacher, cfg.aug
    r_init, r_order, r_aug = Rng(seed).split(3)
    model = TeacherModel(r_init, patch_h=ac.patch_h, patch_w=ac.patch_w, dim=cfg.dim, n_classes=ds.n_classes)
    samples = _labeled_samples(ds.train)
    if not samples:
        raise ConfigError("dataset has no labeled training boxes")
    labels = np.array([b.identity for _, b in samples])
    gt_patches = np.stack([crop_patch(s, b, ac.patch_h, ac.patch_w) for s, b in samples])
    opt = SGD(tc.momentum, tc.weight_decay)
    history = []
    for epoch in range(tc.epochs):
        lr = tc.lr * (tc.decay if epoch >= int(tc.decay_at * tc.epochs) else 1.0)
        order = r_order.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start : start + tc.batch_size]
            if aug == "isa":
                patches = np.stack([
                    crop_patch(samples[i][0], isa_expand_and_crop(samples[i][1], ac, r_aug, ds.image_size),
                               ac.patch_h, ac.patch_w)
                    for i in idx
                ])
            else:
                patches = gt_patches[idx]
            _, logits = model.forward(patches)
            loss = losses.reid_ce(logits, labels[idx])
            if not math.isfinite(float(loss.data)):
                raise DivergenceError(f"teacher loss diverged at epoch {epoch}")
            opt.step(model, backward(loss, model), lr)
            total += float(loss.data) * len(idx)
        history.append(total / len(samples))
        log.debug("teacher[%s] epoch %d ce %.4f", aug, epoch, history[-1])
    return model, history


# --- student ------------------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    config: dict
    row: str
    losses: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    teacher: Optional[str] = None

    def loss_curve(self, term: str = "total") -> np.ndarray:
        return np.array([r[term] for r in self.losses])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


class _TeacherCache:
    """Teacher outputs on ground-truth patches are fixed; compute them once."""

    def __init__(self, teacher: TeacherModel, ds: Dataset, aug: AugConfig):
        self.teacher, self.aug = teacher, aug
        self.emb, self.probs = {}, {}
        for scene in ds.train:
            labeled = scene.labeled
            if not labeled:
                continue
            patches = np.stack([crop_patch(scene, b, aug.patch_h, aug.patch_w) for b in labeled])
            e, p = teacher_forward(teacher, patches)
            for k, b in enumerate(labeled):
                self.emb[(scene.scene_id, b)] = e[k]
                self.probs[(scene.scene_id, b)] = p[k]

    def shifted_probs(self, scene_props) -> np.ndarray:
        patches = np.stack([
            crop_patch(scene, prop.image_box(), self.aug.patch_h, self.aug.patch_w) for scene, prop in scene_props
        ])
        return teacher_forward(self.teacher, patches)[1]


def train_student(
    ds: Dataset,
    teacher: Optional[TeacherModel],
    cfg: ExperimentConfig,
    eval_sizes: Sequence[int] = (),
    log_every: int = 0,
):
    """Joint detection + Re-ID training with the configured distillation terms.

    Ground-truth boxes feed the Re-ID and distillation path; the detection
    head trains on the full grid of the same images.
    """
    if cfg.uses_teacher and teacher is None:
        raise ConfigError("a teacher checkpoint is required when any distillation term is enabled")
    t0 = time.perf_counter()
    oc, ac, lc = cfg.optim, cfg.aug, cfg.loss
    r_init, r_order, r_shift = Rng(cfg.seed).split(3)
    n_trunk = int(round(math.log2(ac.stride)))
    if 2**n_trunk != ac.stride:
        raise ConfigError(f"stride {ac.stride} is not a power of two")
    channels = [8, 16, 16, 16][:n_trunk]
    model = StudentModel(r_init, trunk_channels=channels, dim=cfg.dim, n_classes=ds.n_classes)
    cache = _TeacherCache(teacher, ds, ac) if cfg.uses_teacher else None
    scenes = [s for s in ds.train if s.labeled]
    grid = (ds.image_size[0] // ac.stride, ds.image_size[1] // ac.stride)
    targets_all = {s.scene_id: boxes_to_array(s.annotations) for s in scenes}
    opt = SGD(oc.momentum, oc.weight_decay)
    record = RunRecord(cfg.config_hash(), cfg.to_dict(), row_name(cfg))

    order, cursor = r_order.permutation(len(scenes)), 0
    for it in range(oc.iterations):
        batch = []
        while len(batch) < oc.batch_size:
            if cursor == len(order):
                order, cursor = r_order.permutation(len(scenes)), 0
            batch.append(scenes[order[cursor]])
            cursor += 1
        images = np.stack([s.image for s in batch])
        props, pairs, labels = [], [], []
        for s in batch:
            row = []
            for b in s.labeled:
                if cfg.use_fsa:
                    p = fsa_shift(b, isa_crop_range(b, ac), ac, r_shift, ds.image_size)
                else:
                    p = ShiftedProposal(b, 0.0, 0.0, ac.stride)
                row.append(p)
                pairs.append((s, p))
                labels.append(b.identity)
            props.append(row)
        out = student_forward(model, images, props, with_shifted=cfg.use_fsa and cfg.use_lp)
        if out.failed:
            raise RuntimeError(f"ground-truth proposals fell outside the feature map: {out.failed}")

        parts = {
            "l_det": detection_loss(out.det, detection_targets([targets_all[s.scene_id] for s in batch], grid, ac.stride)),
            "l_reid": losses.reid_ce(out.logits, labels),
            "l_p": 0.0,
            "l_pr": 0.0,
            "l_tr": 0.0,
        }
        if cache is not None:
            keys = [(s.scene_id, p.base) for s, p in pairs]
            t_emb = np.stack([cache.emb[k] for k in keys])
            t_prob = np.stack([cache.probs[k] for k in keys])
            if cfg.use_lp:
                if cfg.use_fsa:
                    parts["l_p"] = losses.prob_kd_fsa(out.probs, out.shifted_probs, t_prob, cache.shifted_probs(pairs))
                else:
                    parts["l_p"] = losses.prob_kd(out.probs, t_prob)
            if cfg.use_lpr:
                parts["l_pr"] = losses.pairwise_relation_kd(out.embeddings, t_emb)
            if cfg.use_ltr:
                parts["l_tr"] = losses.triplet_relation_kd(out.embeddings, t_emb, lc.margin, lc.normalize_triplet)

        try:
            breakdown = losses.total_loss(parts, lc)
        except ValueError as e:
            raise DivergenceError(f"iteration {it}: {e}") from None
        total = losses.weighted_total(parts, lc)
        grads = backward(total, model)
        opt.step(model, grads, oc.lr_at(it))
        record.losses.append(breakdown.as_dict())
        if log_every and it % log_every == 0:
            log.info("it %d %s", it, {k: round(v, 4) for k, v in breakdown.as_dict().items()})

    if eval_sizes:
        reports = evaluate_student(model, ds, eval_sizes)
        record.metrics = {str(k): r.to_dict() for k, r in reports.items()}
    record.wall_time = time.perf_counter() - t0
    return model, record


def evaluate_student(model, ds: Dataset, gallery_sizes: Sequence[int], seed: int = 0) -> dict[int, MetricsReport]:
    return evaluate_search(model, ds.queries, ds.gallery, list(gallery_sizes), seed=seed)


# --- ablation sweep -------------------------------------------------------------------


@dataclass
class AblationResult:
    rows: dict  # row name -> list of (seed, MetricsReport)

    def summary(self) -> dict:
        out = {}
        for name, runs in self.rows.items():
            maps = np.array([r.reid_map for _, r in runs]) * 100
            top1 = np.array([r.top1 for _, r in runs]) * 100
            out[name] = dict(map_mean=maps.mean(), map_std=maps.std(), top1_mean=top1.mean(), top1_std=top1.std())
        return out

    def table(self) -> str:
        lines = [f"{'Method':<8} | {'Lpr':^3} | {'Ltr':^3} | {'Lp':^3} | {'ISA':^3} | {'FSA':^3} | {'mAP':^15} | {'top-1':^15}"]
        lines.append("-" * len(lines[0]))
        for name, s in self.summary().items():
            lp, lpr, ltr, isa, fsa = ABLATIONS.get(name, (None,) * 5)
            mark = lambda f: "x" if f else "-"  # noqa: E731
            lines.append(
                f"{name:<8} | {mark(lpr):^3} | {mark(ltr):^3} | {mark(lp):^3} | {mark(isa):^3} | {mark(fsa):^3} | "
                f"{s['map_mean']:6.2f} ± {s['map_std']:5.2f} | {s['top1_mean']:6.2f} ± {s['top1_std']:5.2f}"
            )
        return "\n".join(lines)


def run_ablation(
    ds: Dataset,
    seeds: Sequence[int],
    rows: Sequence[str] = KD_ROWS,
    base: Optional[ExperimentConfig] = None,
    gallery_size: Optional[int] = None,
    on_run=None,
) -> AblationResult:
    """Train every requested table row for every seed and evaluate mAP / top-1."""
    if not seeds:
        raise ConfigError("need at least one seed")
    base = base or ExperimentConfig()
    size = gallery_size or len(ds.gallery)
    result = AblationResult({name: [] for name in rows})
    for seed in seeds:
        teachers = {}
        for name in rows:
            cfg = preset(name, base, seed=seed)
            teacher = None
            if cfg.uses_teacher:
                kind = "isa" if cfg.use_isa else "none"
                if kind not in teachers:
                    teachers[kind] = train_teacher(ds, kind, cfg, seed=seed)[0]
                teacher = teachers[kind]
            model, record = train_student(ds, teacher, cfg, eval_sizes=[size])
            report = MetricsReport.from_dict(record.metrics[str(size)])
            result.rows[name].append((seed, report))
            if on_run is not None:
                on_run(name, seed, model, record)
            log.info("%s seed %d: mAP %.4f top-1 %.4f (%.1fs)", name, seed, report.reid_map, report.top1, record.wall_time)
    return result
