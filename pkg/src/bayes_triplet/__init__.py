"""Stochastic triplet embeddings with a closed-form triplet likelihood."""

__version__ = "0.1.0"

from .stochastic import (
    DegenerateEmbeddingError,
    DimensionMismatchError,
    GaussianEmbedding,
    Triplet,
    TripletLabel,
    VmfEmbedding,
    embeddings_from_csv,
    embeddings_to_csv,
    expected_sq_distance,
    normalize_mean,
    sq_distance_of_means,
)
from .moments import TauMoments, tau_mean, tau_moments, tau_variance
from .likelihood import (
    DeterministicViolationWarning,
    Margin,
    hinge_triplet_loss,
    log_std_normal_cdf,
    nll,
    triplet_nll,
    triplet_probability,
)
from .priors import (
    PriorSpec,
    kl_gaussian_to_prior,
    kl_vmf_to_uniform,
    log_bessel_iv,
    sample_vmf,
    vmf_log_normalizer,
    vmf_mean_resultant,
    vmf_to_gaussian_moments,
)
from .gradients import (
    DegenerateTripletError,
    FiniteDiffReport,
    TripletGrad,
    finite_diff_check,
    kl_gradients,
    nll_gradients,
)
from .mc import ApproxStudyReport, estimate_moments, ks_distance, run_approximation_study, sample_tau
from .metrics import (
    CalibrationReport,
    RetrievalResult,
    auroc,
    calibration_bins,
    ece_at_k,
    map_at_k,
    ood_separation,
    recall_at_k,
    retrieve,
)
from .data import SyntheticDataset, generate_ood_inputs, generate_synthetic_dataset
from .encoder import EncoderParams, encoder_backward, encoder_forward, init_encoder
from .trainer import (
    MiningCache,
    TrainConfig,
    TrainingDivergedError,
    mine_hard_negatives,
    refresh_cache,
    train,
    train_baseline,
)

__all__ = [name for name in dir() if not name.startswith("_")]
