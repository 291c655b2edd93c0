"""Saliency-conditioned diffusion purification against backdoor and adversarial inputs.

The package is organised by pipeline stage: :mod:`core` (domains, schedule,
seeding), :mod:`datagen`, :mod:`models`, :mod:`attacks`, :mod:`saliency`,
:mod:`diffusion`, :mod:`sancdifi` (the two-phase defense), :mod:`evalharness`
(metrics and experiment grid) and :mod:`cli`.
"""

from .attacks import TriggerSpec, embed_trigger, make_badnet_trigger, make_invisible_trigger, pgd_attack, \
    poison_dataset
from .config import ConfigError, RunConfig, load_config
from .core import SIGNED, UNIT, DiffusionSchedule, ImageTensor, ParameterError, derive_seed, make_linear_schedule, \
    make_rng, to_signed, to_unit
from .datagen import LabeledDataset, ShapeDatasetSpec, generate_shape_dataset, train_val_split
from .diffusion import PurifyConfig, diffpure, forward_sample, masked_forward, masked_reverse_step, purify, \
    reverse_step
from .evalharness import Defense, ExperimentSetup, ExperimentSpec, MetricsReport, ablation_suite, build_setup, \
    eval_asr, eval_clean_accuracy, replicate_seeds, \
    run_experiment, run_matrix
from .formats import FormatError, TruncatedFileError, read_dataset, read_model, read_tensor, write_dataset, \
    write_model, write_tensor
from .models import AnalyticGaussianDenoiser, ToyClassifier, ToyNoisePredictor, TrainingDivergedError
from .saliency import RiseConfig, RiseSaliency, composite_mask, generate_rise_masks, percentile_mask, \
    rise_saliency, rise_saliency_maps
from .sancdifi import DiffPurePurifier, SancdifiConfig, SancdifiPurifier, sancdifi_no_second_phase, sancdifi_purify
from .training import TrainConfig, TrojanQualityError, train_classifier, train_noise_predictor, \
    train_trojan_classifier

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
