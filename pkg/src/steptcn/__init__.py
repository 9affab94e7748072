"""Online surgical step recognition with weak phase supervision.

A causal single-stage TCN over per-frame features, trained with a loss that
switches per video between step cross-entropy and a dependency loss that
maps step probabilities into phase space through a step-to-phase table.
Everything runs on numpy through a small reverse-mode autodiff engine.
"""

from .errors import (ConfigError, ContractError, DataError, DimensionError, FormatError, LabelError,
                     NumericError, SequencingError, StepTCNError)
from .ontology import (Ontology, builtin_cataracts_ontology, derive_phase_labels, load_ontology,
                       local_idle_cataracts_ontology, phase_transform, validate_ontology)
from .model import (FeatureBuffer, ModelConfig, ModelState, forward_offline, forward_video_online,
                    gradcheck_config, init_model, parameter_count, receptive_field)
from .losses import ClassWeights, dependency_loss, median_frequency_weights, step_loss, total_loss
from .data import (GeneratorConfig, VideoRecord, assign_annotation_regime, default_generator_config,
                   generate_synthetic_dataset, load_manifest, read_video_file, write_dataset,
                   write_video_file)
from .metrics import DatasetMetrics, VideoMetrics, dataset_metrics, per_class_prf, video_metrics
from .train import (TrainConfig, evaluate, fit, load_checkpoint, model_gradient_check, predict,
                    save_checkpoint, train_epoch)
from .harness import (ExperimentSpec, emit_report, emit_ribbon_svg, run_phase_count_sweep,
                      run_weak_supervision_grid)

__version__ = "0.1.0"
