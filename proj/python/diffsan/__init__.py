"""Dataset sanitization for backdoor-poisoned training sets.

The package detects poisoned samples by voting over iterated
noising/denoising trajectories, flags the attack's target labels, and
rebuilds a purified, relabeled training set. Heavy lifting happens in the
compiled extension; images cross the boundary as float32 numpy arrays
shaped (channels, height, width).
"""

from ._core import (
    Classifier,
    ConfigError,
    Dataset,
    Denoiser,
    IntegrityError,
    NoiseSchedule,
    StageError,
    apply_trigger,
    build_asr_testset,
    classify_sample,
    default_config,
    forward_diffuse,
    kl_metric,
    load_dataset,
    load_metrics,
    load_target_report,
    make_pattern_dataset,
    make_schedule,
    mad_anomaly_index,
    poison_dataset,
    purify_sample,
    run_pipeline,
    select_purified_index,
    ssim,
    train_classifier,
    train_denoiser,
    transition_stats,
)

__all__ = [
    "Classifier",
    "ConfigError",
    "Dataset",
    "Denoiser",
    "IntegrityError",
    "NoiseSchedule",
    "StageError",
    "apply_trigger",
    "build_asr_testset",
    "classify_sample",
    "default_config",
    "forward_diffuse",
    "kl_metric",
    "load_dataset",
    "load_metrics",
    "load_target_report",
    "make_pattern_dataset",
    "make_schedule",
    "mad_anomaly_index",
    "poison_dataset",
    "purify_sample",
    "run_pipeline",
    "select_purified_index",
    "ssim",
    "train_classifier",
    "train_denoiser",
    "transition_stats",
]
