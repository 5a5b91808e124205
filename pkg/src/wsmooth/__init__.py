"""Certified robustness of grid-image classifiers against Wasserstein-ball
perturbations, via randomized smoothing with Laplace noise applied to local
mass flows between adjacent pixels."""

from .attack import AttackConfig, AttackResult, flow_pgd_attack, project_l1_ball, robustness_curve
from .classifier import (
    ClassifierParams,
    TrainConfig,
    TrainResult,
    accuracy,
    gradient,
    init_params,
    input_gradient_batch,
    load_checkpoint,
    loss_and_gradients,
    save_checkpoint,
    train,
)
from .dataset_io import (
    DegenerateImageError,
    IdxFormatError,
    IdxLengthError,
    LabeledDataset,
    PairingError,
    export_csv,
    load_idx,
    load_idx_images,
    load_idx_labels,
    make_dataset,
    nonzero_mask,
    normalize,
    normalize_multichannel,
    synthetic_dataset,
    write_idx_images,
    write_idx_labels,
)
from .flow_domain import (
    EdgeFlow,
    GridImage,
    LocalFlowPlan,
    MultiChannelImage,
    NormalizationError,
    RawGrid,
    ShapeMismatchError,
    apply_flow,
    compose,
    edge_from_flow,
    flow_from_edge,
    l1_norm,
    solve_flow_1d,
)
from .smoothing import (
    ABSTAIN,
    Certificate,
    CertificationRecord,
    NoiseSpec,
    SmoothedPrediction,
    certify,
    clopper_pearson_lower,
    median_certified_radius,
    perturb,
    prediction_from_counts,
    radius_from_plower,
    sample_flow_noise,
    smoothed_predict,
    soft_smoothed_scores,
)
from .transport_oracle import (
    ChannelMassError,
    GroundMetric,
    ScaleError,
    TransportPlan,
    min_flow_plan,
    per_channel_wasserstein,
    run_oracle_checks,
    wasserstein_grid_l1,
    wasserstein_lp,
)

__version__ = "0.1.0"
