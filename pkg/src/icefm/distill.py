"""Multi-teacher knowledge distillation.

Domain experts (one per season, one per region, eight in total by default)
are trained on their own slice of the training split, frozen, and then
jointly supervise a student through

    L = alpha * CE(student, labels)
        + (1 - alpha) * mean_i KL(softmax(t_i / T) || softmax(s / T))

with the KL averaged over labelled pixels per teacher and then uniformly
over teachers. The temperature softens both distributions; no T^2 gradient
rescaling is applied unless explicitly requested. At alpha = 1 the loss is
exactly the supervised cross-entropy, teachers untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .metrics import IGNORE_INDEX
from .models import ModelSpec, build, load_checkpoint, unet_spec
from .adapt import apply_full, apply_strategy
from .sardata import (REGIONS, SEASONS, DatasetManifest, PatchSet,
                      build_patchset, channels_for)
from .train import TrainConfig, TrainResult, fit, masked_cross_entropy

DOMAIN_AXES = ("season", "region")


def default_teacher_domains() -> list[tuple[str, str]]:
    """(axis, value) tags for the standard eight-expert ensemble."""
    return [("season", s) for s in SEASONS] + [("region", r) for r in REGIONS]


def kd_loss(student_logits: torch.Tensor, teacher_logits: list[torch.Tensor],
            labels: torch.Tensor, alpha: float = 0.5, temperature: float = 3.0,
            ignore_index: int = IGNORE_INDEX, rescale_t2: bool = False) -> torch.Tensor:
    """Distillation objective over one batch of pixel logits.

    Per teacher, KL(teacher || student) at temperature T is averaged over
    pixels with a valid label; the per-teacher values are then averaged with
    equal weight. Ignored pixels contribute to neither term. The per-teacher
    terms are summed in sorted value order, so reordering the ensemble can
    never perturb the result, not even in the last bit.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if alpha < 1.0 and not teacher_logits:
        raise ConfigError("kd_loss needs at least one teacher when alpha < 1")
    for i, t in enumerate(teacher_logits):
        if t.shape != student_logits.shape:
            raise ConfigError(
                f"teacher {i} logits shape {tuple(t.shape)} does not match "
                f"student {tuple(student_logits.shape)}")

    ce = masked_cross_entropy(student_logits, labels, ignore_index)
    if alpha == 1.0:
        return ce

    mask = labels.long() != ignore_index
    if not bool(mask.any()):
        return alpha * ce  # no labelled pixels: distillation term is empty too

    log_p_s = F.log_softmax(student_logits / temperature, dim=1)
    per_teacher = []
    for t in teacher_logits:
        log_p_t = F.log_softmax(t / temperature, dim=1)
        kl_map = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=1)  # (B, H, W)
        per_teacher.append(kl_map[mask].mean())
    kl = torch.stack(per_teacher)
    kl_mean = torch.sort(kl).values.sum() / kl.shape[0]
    if rescale_t2:
        kl_mean = kl_mean * temperature ** 2
    return alpha * ce + (1.0 - alpha) * kl_mean


# ---------------------------------------------------------------------------
# teachers


@dataclass
class TeacherEnsemble:
    models: list[torch.nn.Module]
    domains: list[tuple[str, str]]  # (axis, value) per teacher

    def __post_init__(self):
        if len(self.models) != len(self.domains):
            raise ConfigError("one domain tag per teacher model is required")
        if len(self.models) < 1:
            raise ConfigError("an ensemble needs at least one teacher")

    def freeze(self) -> None:
        for m in self.models:
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    def forward_all(self, x: torch.Tensor) -> list[torch.Tensor]:
        with torch.no_grad():
            return [m(x) for m in self.models]


def _domain_scene_ids(manifest: DatasetManifest, split: str,
                      axis: str, value: str) -> list[str]:
    if axis == "season":
        return manifest.split_ids(split, season=value)
    if axis == "region":
        return manifest.split_ids(split, region=value)
    raise ConfigError(f"unknown domain axis {axis!r}; expected one of {DOMAIN_AXES}")


def build_expert_teachers(manifest: DatasetManifest, base_spec: ModelSpec,
                          train_cfg: TrainConfig, strategy: str = "full",
                          domains: list[tuple[str, str]] | None = None,
                          patches_per_scene: int = 8,
                          val_patches_per_scene: int = 4,
                          seed: int = 0,
                          out_dir: str | Path | None = None) -> TeacherEnsemble:
    """Train one expert per domain on that domain's training scenes.

    Every expert sees only scenes tagged with its season (or region) and is
    validated on the matching validation scenes. Missing domains are an
    error, reported all at once. The returned ensemble is frozen.
    """
    domains = domains if domains is not None else default_teacher_domains()
    channels = channels_for(base_spec.in_channels)
    missing = []
    for axis, value in domains:
        if not _domain_scene_ids(manifest, "train", axis, value):
            missing.append(f"{axis}:{value} (train)")
        if not _domain_scene_ids(manifest, "val", axis, value):
            missing.append(f"{axis}:{value} (val)")
    if missing:
        raise ConfigError(f"dataset lacks scenes for teacher domains: {missing}")

    models = []
    for i, (axis, value) in enumerate(domains):
        train_ids = _domain_scene_ids(manifest, "train", axis, value)
        val_ids = _domain_scene_ids(manifest, "val", axis, value)
        train_set = build_patchset(manifest, train_ids, "random_train", channels,
                                   per_scene=patches_per_scene, augment=True,
                                   seed=seed + i)
        val_set = build_patchset(manifest, val_ids, "random_train", channels,
                                 per_scene=val_patches_per_scene, augment=False,
                                 seed=seed + i + 1000)
        model = build(base_spec, seed=seed + i)
        plan = apply_strategy(model, strategy, seed=seed + i)
        cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": seed + i})
        teacher_dir = Path(out_dir) / f"teacher_{axis}_{value}" if out_dir else None
        fit(plan, train_set, val_set, cfg, out_dir=teacher_dir,
            checkpoint_meta={"train_domain": f"{axis}:{value}"})
        models.append(plan.model)

    ensemble = TeacherEnsemble(models=models, domains=list(domains))
    ensemble.freeze()
    return ensemble


def load_teacher_ensemble(paths: list[str | Path]) -> TeacherEnsemble:
    """Restore a frozen ensemble from checkpoints carrying train_domain tags."""
    models, domains = [], []
    for p in paths:
        model, meta = load_checkpoint(p)
        tag = meta.get("train_domain")
        if not tag or ":" not in tag:
            raise ConfigError(f"{p}: checkpoint has no train_domain tag; "
                              "not usable as a distillation teacher")
        axis, value = tag.split(":", 1)
        models.append(model)
        domains.append((axis, value))
    ensemble = TeacherEnsemble(models=models, domains=domains)
    ensemble.freeze()
    return ensemble


# ---------------------------------------------------------------------------
# student


@dataclass
class DistillConfig:
    student_spec: ModelSpec = field(default_factory=lambda: unet_spec("unet_student"))
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    alpha: float = 0.5
    temperature: float = 3.0
    rescale_t2: bool = False
    teacher_checkpoints: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        self.student_spec.validate()
        self.train_cfg.validate()


def check_compatible(cfg: DistillConfig, ensemble: TeacherEnsemble) -> None:
    for i, model in enumerate(ensemble.models):
        spec = model.spec
        if spec.class_count != cfg.student_spec.class_count:
            raise ConfigError(
                f"teacher {i} predicts {spec.class_count} classes, student "
                f"{cfg.student_spec.class_count}")
        if spec.in_channels != cfg.student_spec.in_channels:
            raise ConfigError(
                f"teacher {i} expects {spec.in_channels} input channels, student "
                f"{cfg.student_spec.in_channels}")


def _teacher_logit_cache(ensemble: TeacherEnsemble, data: PatchSet,
                         batch_size: int) -> list[torch.Tensor]:
    """One (N, K, h, w) logit tensor per teacher over the whole patch stack."""
    x = torch.from_numpy(data.channels)
    cache = []
    with torch.no_grad():
        for model in ensemble.models:
            model.eval()
            parts = [model(x[start:start + batch_size])
                     for start in range(0, x.shape[0], batch_size)]
            cache.append(torch.cat(parts))
    return cache


def distill(cfg: DistillConfig, train_data: PatchSet, val_data: PatchSet,
            ensemble: TeacherEnsemble | None = None,
            out_dir: str | Path | None = None) -> TrainResult:
    """Train a student under the distillation objective; returns the usual
    TrainResult (best weights live on the returned plan's model)."""
    cfg.validate()
    if ensemble is None:
        if not cfg.teacher_checkpoints:
            raise ConfigError("distill needs an ensemble or teacher_checkpoints")
        ensemble = load_teacher_ensemble(cfg.teacher_checkpoints)
    check_compatible(cfg, ensemble)
    ensemble.freeze()

    student = build(cfg.student_spec, seed=cfg.train_cfg.seed)
    plan = apply_full(student)

    # Teachers are frozen and the patch stack is fixed, so their logits can
    # be computed once up front instead of once per step per epoch.
    cache = _teacher_logit_cache(ensemble, train_data, cfg.train_cfg.batch_size)

    def objective(logits, inputs, labels, indices):
        teacher_logits = [c[indices] for c in cache]
        return kd_loss(logits, teacher_logits, labels, alpha=cfg.alpha,
                       temperature=cfg.temperature, rescale_t2=cfg.rescale_t2)

    meta = {"alpha": cfg.alpha, "temperature": cfg.temperature,
            "teachers": [f"{a}:{v}" for a, v in ensemble.domains]}
    return fit(plan, train_data, val_data, cfg.train_cfg, out_dir=out_dir,
               loss_fn=objective, checkpoint_meta=meta)
