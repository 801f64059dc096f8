"""Desk-scale benchmark harness for sea-ice-type semantic segmentation.

Synthetic dual-polarization SAR-like scenes with controllable seasonal and
regional distribution shift, support-weighted segmentation metrics, five
fine-tuning strategies over toy backbones, a training/efficiency protocol,
transfer and data-size experiment drivers, and multi-teacher knowledge
distillation.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, MetricsError,  # noqa: E402,F401
                     SceneFormatError, TrainingDivergedError,
                     UnsupportedArchitectureError)
from .metrics import ConfusionMatrix, MetricsReport  # noqa: F401
from .sardata import (DatasetManifest, Scene, SynthConfig,  # noqa: F401
                      generate_dataset, load_scene, save_scene,
                      shift_free_config, shift_heavy_config)
from .models import ModelSpec, build, load_checkpoint, save_checkpoint  # noqa: F401
from .adapt import (LoraConfig, TrainPlan, VptConfig, apply_bitfit,  # noqa: F401
                    apply_frozen_encoder, apply_full, apply_lora,
                    apply_strategy, apply_vpt)
from .train import TrainConfig, TrainResult, fit, masked_cross_entropy  # noqa: F401
from .profiler import EfficiencyRecord, ResourceSampler, profile  # noqa: F401
from .distill import (DistillConfig, TeacherEnsemble,  # noqa: F401
                      build_expert_teachers, distill, kd_loss)
from .bench import (GridSpec, SweepSpec, TransferSpec, evaluate,  # noqa: F401
                    run_grid, run_sweep, run_transfer)
