"""Incremental object detection with inversion-generated replay."""

import torch as _torch  # noqa: F401  loads libtorch before the extension needs it

from ._core import (
    AblationRow,
    EvalResult,
    ExperimentConfig,
    Run,
    StepEval,
    StepMetrics,
    ablation_variant,
    class_name,
    generate_dataset,
    plot_ablation_bars,
    plot_ap_curves,
    plot_contact_sheet,
    read_ablation_csv,
    read_metrics_csv,
    run_ablation,
)

__all__ = [
    "AblationRow",
    "EvalResult",
    "ExperimentConfig",
    "Run",
    "StepEval",
    "StepMetrics",
    "ablation_variant",
    "class_name",
    "generate_dataset",
    "plot_ablation_bars",
    "plot_ap_curves",
    "plot_contact_sheet",
    "read_ablation_csv",
    "read_metrics_csv",
    "run_ablation",
]
