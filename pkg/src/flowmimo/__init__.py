"""Joint channel sounding and source-channel coding over block-fading MIMO-OFDM.

Simulation and analysis toolkit: Gaussian-mixture flow priors with
closed-form velocities, a parallel flow-matching posterior sampler for
joint channel/source recovery, Fisher-information and Bayesian bound
machinery, pilot-based linear baselines, and a Monte-Carlo sweep harness.
"""

from .channel_sim import ReceiveTensor, SystemDims, channel_to_real, real_to_channel
from .encoders import LinearEncoder, PilotScheme, PowerOverflowError
from .fim_bcrb import BcrbResult, FimMatrix, assemble_fim, bcrb, bfim
from .flow_priors import GmmComponent, GmmPrior, MlpVf
from .harness import ConfigError, ExperimentConfig, run_sweep
from .pfm_decoder import LikelihoodModel, PfmConfig, PfmResult, pfm_decode

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "SystemDims",
    "ReceiveTensor",
    "channel_to_real",
    "real_to_channel",
    "LinearEncoder",
    "PilotScheme",
    "PowerOverflowError",
    "GmmComponent",
    "GmmPrior",
    "MlpVf",
    "LikelihoodModel",
    "PfmConfig",
    "PfmResult",
    "pfm_decode",
    "FimMatrix",
    "BcrbResult",
    "assemble_fim",
    "bfim",
    "bcrb",
    "ConfigError",
    "ExperimentConfig",
    "run_sweep",
]
