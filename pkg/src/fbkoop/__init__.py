"""Noise-robust linear Koopman models of controlled nonlinear systems.

Learns a lifted linear model jointly with forward and backward one-step
operators from noisy trajectory data, synthesizes a reduced-bias operator
from the pair, and drives open-loop prediction and closed-loop MPC tracking
with the result.
"""

from .bench import BiasDiagnostics, Metrics, bias_mc, pred_error, track_error
from .datagen import NoiseSpec, TripletBatch, build_triplets, corrupt, gen_dataset
from .lifting import EncoderLifting, EncoderParams, IdentityLifting, MonomialLifting
from .mpc import MpcConfig, TrackResult, condense, mpc_step, solve_box_qp, track
from .operator import (BlockOp, KoopmanModel, assemble, fb_edmd_fit, fb_net_model,
                       nominal_fit, reduced_bias, rollout)
from .systems import ArmParams, LinearParams, SystemSpec, Trajectory, VdpParams, simulate
from .training import LossWeights, TrainConfig, TrainState, train

__version__ = "0.1.0"

__all__ = [
    "ArmParams", "BiasDiagnostics", "BlockOp", "EncoderLifting", "EncoderParams",
    "IdentityLifting", "KoopmanModel", "LinearParams", "LossWeights", "Metrics",
    "MonomialLifting", "MpcConfig", "NoiseSpec", "SystemSpec", "TrackResult",
    "TrainConfig", "TrainState", "Trajectory", "TripletBatch", "VdpParams",
    "assemble", "bias_mc", "build_triplets", "condense", "corrupt", "fb_edmd_fit",
    "fb_net_model", "gen_dataset", "mpc_step", "nominal_fit", "pred_error",
    "reduced_bias", "rollout", "simulate", "solve_box_qp", "track", "track_error",
    "train",
]
