"""Shared fixtures: datasets and the expert-teacher ensemble are expensive,
so they are built once per session and reused by unit and acceptance tests.

The hyperparameters pinned here are the desk-scale reference configuration:
small scenes (64x64, patch 32), short cosine schedules at lr 1e-3. Both the
distillation comparison and the transfer/sweep drivers use these exact
settings, so their outcomes are deterministic for a given platform.
"""

import pytest

from icefm.distill import build_expert_teachers
from icefm.models import unet_spec, vit_tiny_spec
from icefm.sardata import generate_dataset, shift_free_config, shift_heavy_config
from icefm.train import TrainConfig

TEACHER_SEED = 100
TEACHER_PATCHES = 8
TEACHER_VAL_PATCHES = 3
STUDENT_PATCHES = 6
STUDENT_VAL_PATCHES = 3
KD_SEEDS = [0, 1, 2]


def teacher_train_config() -> TrainConfig:
    return TrainConfig(lr=1e-3, scheduler="cosine", max_epochs=12, batch_size=8)


def student_train_config(seed: int) -> TrainConfig:
    return TrainConfig(lr=1e-3, weight_decay=1e-2, scheduler="cosine",
                       max_epochs=10, batch_size=8, seed=seed)


def transfer_train_config() -> TrainConfig:
    return TrainConfig(lr=1e-3, scheduler="cosine", max_epochs=6, batch_size=8)


@pytest.fixture(scope="session")
def heavy_dataset(tmp_path_factory):
    """Shift-heavy dataset: per-domain label tilts plus backscatter offsets."""
    root = tmp_path_factory.mktemp("heavy")
    manifest = generate_dataset(shift_heavy_config(), root)
    return manifest


@pytest.fixture(scope="session")
def flat_dataset(tmp_path_factory):
    """Shift-free dataset: identical distribution in every domain."""
    root = tmp_path_factory.mktemp("flat")
    manifest = generate_dataset(shift_free_config(), root)
    return manifest


@pytest.fixture(scope="session")
def expert_ensemble(heavy_dataset):
    """Eight frozen domain experts (4 seasons + 4 regions) on the heavy set."""
    return build_expert_teachers(
        heavy_dataset, vit_tiny_spec("vit_teacher"), teacher_train_config(),
        patches_per_scene=TEACHER_PATCHES,
        val_patches_per_scene=TEACHER_VAL_PATCHES, seed=TEACHER_SEED)


@pytest.fixture()
def student_spec():
    return unet_spec("unet_student")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance verdict lines after the run, outside capture."""
    import sys as _sys
    mod = _sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance gate")
        for line in lines:
            terminalreporter.write_line(line)
