"""Blind-spot dilated-convolution denoising: train on noisy images alone,
then predict via Bayesian fusion of the network output with the noise
distribution."""

__version__ = "0.1.0"

from .evaluation import EvalRecord, cross_sigma_eval, denoise, dirac_probe, psnr
from .network import (GaussianPredictionMap, NetworkConfig, assert_blind_spot,
                      build_network, forward, receptive_field_info, rf_half)
from .noise import (NoiseModel, corrupt, gaussian, gaussian_range, mean_only,
                    nll_loss, parse_noise_spec, poisson, poisson_as_gaussian,
                    posterior, posterior_map)
from .reports import emit_reports
from .tensor import Tensor, backward, blind_spot_mask, conv2d
from .training import (Checkpoint, TrainConfig, adam_step, extract_patches,
                       load_checkpoint, network_from_checkpoint, save_checkpoint,
                       train)

__all__ = [
    "__version__",
    "Tensor", "backward", "blind_spot_mask", "conv2d",
    "NetworkConfig", "GaussianPredictionMap", "build_network", "forward",
    "assert_blind_spot", "receptive_field_info", "rf_half",
    "NoiseModel", "gaussian", "gaussian_range", "poisson", "parse_noise_spec",
    "corrupt", "nll_loss", "posterior", "posterior_map", "mean_only",
    "poisson_as_gaussian",
    "TrainConfig", "Checkpoint", "train", "adam_step", "extract_patches",
    "save_checkpoint", "load_checkpoint", "network_from_checkpoint",
    "EvalRecord", "psnr", "dirac_probe", "cross_sigma_eval", "denoise",
    "emit_reports",
]
