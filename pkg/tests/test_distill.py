"""Distillation loss identities (hand-computed KL, CE reduction, ensemble
permutation invariance) and the expert-teacher / student plumbing."""

import math

import numpy as np
import pytest
import torch

from icefm.distill import (DistillConfig, TeacherEnsemble,
                           _teacher_logit_cache, build_expert_teachers,
                           check_compatible, default_teacher_domains, distill,
                           kd_loss, load_teacher_ensemble)
from icefm.errors import ConfigError
from icefm.metrics import IGNORE_INDEX
from icefm.models import build, load_checkpoint, save_checkpoint, unet_spec
from icefm.sardata import PatchSet
from icefm.train import TrainConfig, fit, masked_cross_entropy
from icefm.adapt import apply_full

from oracles import scalar_kl


def _pixel_logits(values):
    """(1, K, 1, 1) logit tensor for a single pixel."""
    return torch.tensor(values, dtype=torch.float32).reshape(1, -1, 1, 1)


def test_single_pixel_against_scalar_oracle():
    student = _pixel_logits([0.0, 0.0])
    teacher = _pixel_logits([3.0, 0.0])
    labels = torch.zeros(1, 1, 1, dtype=torch.long)
    t = 3.0
    loss = kd_loss(student, [teacher], labels, alpha=0.5, temperature=t)
    want_kl = scalar_kl([3.0, 0.0], [0.0, 0.0], t)
    want = 0.5 * math.log(2.0) + 0.5 * want_kl
    assert abs(loss.item() - want) < 1e-6
    # the distillation term alone
    pure = kd_loss(student, [teacher], labels, alpha=0.0, temperature=t)
    assert abs(pure.item() - want_kl) < 1e-6


def test_alpha_one_is_exactly_cross_entropy():
    torch.manual_seed(0)
    student = torch.randn(2, 6, 4, 4)
    teachers = [torch.randn(2, 6, 4, 4) for _ in range(3)]
    labels = torch.randint(0, 6, (2, 4, 4))
    kd = kd_loss(student, teachers, labels, alpha=1.0)
    assert torch.equal(kd, masked_cross_entropy(student, labels))


def test_matching_distributions_have_zero_kl():
    torch.manual_seed(1)
    logits = torch.randn(1, 6, 3, 3)
    labels = torch.randint(0, 6, (1, 3, 3))
    loss = kd_loss(logits, [logits.clone()], labels, alpha=0.0)
    assert loss.item() == 0.0


def test_teacher_order_cannot_change_the_loss():
    torch.manual_seed(2)
    student = torch.randn(2, 6, 4, 4)
    teachers = [torch.randn(2, 6, 4, 4) for _ in range(5)]
    labels = torch.randint(0, 6, (2, 4, 4))
    ref = kd_loss(student, teachers, labels)
    for perm in ([4, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 2, 3, 4, 0]):
        shuffled = [teachers[i] for i in perm]
        assert torch.equal(kd_loss(student, shuffled, labels), ref)


def test_temperature_rescaling_option():
    torch.manual_seed(3)
    student = torch.randn(1, 6, 2, 2)
    teacher = [torch.randn(1, 6, 2, 2)]
    labels = torch.randint(0, 6, (1, 2, 2))
    plain = kd_loss(student, teacher, labels, alpha=0.0, temperature=3.0)
    scaled = kd_loss(student, teacher, labels, alpha=0.0, temperature=3.0,
                     rescale_t2=True)
    assert scaled.item() == pytest.approx(9.0 * plain.item(), rel=1e-6)


def test_ignored_pixels_leave_both_terms():
    torch.manual_seed(4)
    student = torch.randn(1, 6, 2, 2)
    teacher = torch.randn(1, 6, 2, 2)
    labels = torch.randint(0, 6, (1, 2, 2))
    ref = kd_loss(student, [teacher], labels)
    # poison one pixel everywhere and mark it ignored: loss must not move
    student2, teacher2 = student.clone(), teacher.clone()
    labels2 = labels.clone()
    keep = ref.item()
    mask_ref = kd_loss(
        torch.cat([student2, _pixel_logits([50.0] * 6).expand(1, 6, 2, 2)], 0)[:1],
        [teacher2], labels2)
    assert mask_ref.item() == keep
    labels3 = labels.clone()
    labels3[0, 0, 0] = IGNORE_INDEX
    student3 = student.clone()
    student3[0, :, 0, 0] = 77.0
    teacher3 = teacher.clone()
    teacher3[0, :, 0, 0] = -13.0
    a = kd_loss(student3, [teacher3], labels3)
    b = kd_loss(student, [teacher], labels3)
    assert torch.equal(a, b)


def test_fully_ignored_batch_collapses_to_weighted_ce():
    student = torch.randn(1, 6, 2, 2)
    labels = torch.full((1, 2, 2), IGNORE_INDEX)
    with pytest.warns(RuntimeWarning):
        loss = kd_loss(student, [torch.randn(1, 6, 2, 2)], labels, alpha=0.5)
    assert loss.item() == 0.0


def test_kd_loss_validation():
    s = torch.randn(1, 6, 2, 2)
    t = [torch.randn(1, 6, 2, 2)]
    y = torch.randint(0, 6, (1, 2, 2))
    with pytest.raises(ConfigError):
        kd_loss(s, t, y, alpha=1.5)
    with pytest.raises(ConfigError):
        kd_loss(s, t, y, temperature=0.0)
    with pytest.raises(ConfigError):
        kd_loss(s, [], y, alpha=0.5)
    with pytest.raises(ConfigError):
        kd_loss(s, [torch.randn(1, 4, 2, 2)], y)


def test_default_domains_cover_both_axes():
    domains = default_teacher_domains()
    assert len(domains) == 8
    assert [a for a, _ in domains].count("season") == 4
    assert [a for a, _ in domains].count("region") == 4
    assert len(set(domains)) == 8


def test_ensemble_validation_and_freeze():
    m = build(unet_spec(), seed=0)
    with pytest.raises(ConfigError):
        TeacherEnsemble(models=[m], domains=[])
    with pytest.raises(ConfigError):
        TeacherEnsemble(models=[], domains=[])
    ens = TeacherEnsemble(models=[m], domains=[("season", "spring")])
    ens.freeze()
    assert not m.training
    assert all(not p.requires_grad for p in m.parameters())


def test_student_teacher_compatibility():
    cfg = DistillConfig(student_spec=unet_spec(class_count=6))
    bad_k = TeacherEnsemble(models=[build(unet_spec(class_count=4), seed=0)],
                            domains=[("season", "fall")])
    with pytest.raises(ConfigError, match="classes"):
        check_compatible(cfg, bad_k)
    bad_c = TeacherEnsemble(models=[build(unet_spec(in_channels=3), seed=0)],
                            domains=[("season", "fall")])
    with pytest.raises(ConfigError, match="channels"):
        check_compatible(cfg, bad_c)


def test_logit_cache_matches_direct_forward():
    torch.manual_seed(5)
    data = PatchSet(np.random.default_rng(0).normal(
        size=(5, 2, 16, 16)).astype(np.float32),
        np.zeros((5, 16, 16), dtype=np.uint8))
    ens = TeacherEnsemble(
        models=[build(unet_spec(), seed=s) for s in (0, 1)],
        domains=[("season", "spring"), ("season", "summer")])
    ens.freeze()
    cache = _teacher_logit_cache(ens, data, batch_size=2)
    direct = ens.forward_all(torch.from_numpy(data.channels))
    assert len(cache) == 2
    for got, want in zip(cache, direct):
        assert got.shape == (5, 6, 16, 16)
        assert torch.allclose(got, want, atol=1e-5)


def _toy_patchsets(n_train=6, n_val=3, seed=0):
    rng = np.random.default_rng(seed)
    def make(n):
        x = rng.normal(size=(n, 2, 16, 16)).astype(np.float32)
        y = (x[:, 0] > 0).astype(np.uint8) * 2
        return PatchSet(x, y)
    return make(n_train), make(n_val)


def test_alpha_one_distillation_reproduces_plain_fit(student_spec):
    train, val = _toy_patchsets()
    cfg = TrainConfig(lr=1e-3, scheduler="cosine", max_epochs=3,
                      batch_size=4, seed=9)
    ens = TeacherEnsemble(models=[build(unet_spec(), seed=42)],
                          domains=[("season", "winter")])
    dres = distill(DistillConfig(student_spec=student_spec, train_cfg=cfg,
                                 alpha=1.0), train, val, ensemble=ens)
    plain = fit(apply_full(build(student_spec, seed=cfg.seed)), train, val, cfg)
    assert [(s.train_loss, s.val_loss) for s in dres.history] == \
        [(s.train_loss, s.val_loss) for s in plain.history]
    for pa, pb in zip(dres.plan.model.parameters(), plain.plan.model.parameters()):
        assert torch.equal(pa, pb)


def test_distill_writes_tagged_checkpoint(student_spec, tmp_path):
    train, val = _toy_patchsets()
    cfg = TrainConfig(lr=1e-3, max_epochs=1, batch_size=4, seed=0)
    ens = TeacherEnsemble(models=[build(unet_spec(), seed=7)],
                          domains=[("region", "north")])
    res = distill(DistillConfig(student_spec=student_spec, train_cfg=cfg),
                  train, val, ensemble=ens, out_dir=tmp_path)
    _, meta = load_checkpoint(res.checkpoint_path)
    assert meta["alpha"] == 0.5 and meta["temperature"] == 3.0
    assert meta["teachers"] == ["region:north"]


def test_distill_requires_teachers(student_spec):
    train, val = _toy_patchsets()
    with pytest.raises(ConfigError, match="teacher"):
        distill(DistillConfig(student_spec=student_spec), train, val)


def test_untagged_checkpoint_rejected_as_teacher(tmp_path):
    model = build(unet_spec(), seed=0)
    path = tmp_path / "plain.pt"
    save_checkpoint(model, {"strategy": "full"}, path)
    with pytest.raises(ConfigError, match="train_domain"):
        load_teacher_ensemble([path])


def test_expert_builder_reports_missing_domains(flat_dataset):
    with pytest.raises(ConfigError, match="polar_night"):
        build_expert_teachers(flat_dataset, unet_spec(), TrainConfig(),
                              domains=[("season", "polar_night")])


def test_expert_ensemble_structure(expert_ensemble):
    assert len(expert_ensemble.models) == 8
    assert expert_ensemble.domains == default_teacher_domains()
    for model in expert_ensemble.models:
        assert not model.training
        assert all(not p.requires_grad for p in model.parameters())


def test_teacher_roundtrip_through_checkpoints(expert_ensemble, heavy_dataset,
                                               tmp_path):
    # saving and reloading two experts preserves weights and domain tags
    paths = []
    for model, (axis, value) in list(zip(expert_ensemble.models,
                                         expert_ensemble.domains))[:2]:
        p = tmp_path / f"{axis}_{value}.pt"
        save_checkpoint(model, {"train_domain": f"{axis}:{value}"}, p)
        paths.append(p)
    back = load_teacher_ensemble(paths)
    assert back.domains == expert_ensemble.domains[:2]
    x = torch.randn(1, 2, 32, 32)
    with torch.no_grad():
        for orig, redux in zip(expert_ensemble.models[:2], back.models):
            assert torch.equal(orig(x), redux(x))
