"""Non-Markovian collapse models and their Bohmian bath reformulation."""
from ._version import __version__
from .errors import (CollapsarError, ConfigError, DegenerateState, GridMismatch, InvalidArgument,
                     InvalidOperator, NotPositiveSemiDefinite, ShapeError, TooLarge, UseModeListDirectly)
from .qcore import MixedState, PureState
from .kernels import (CosineSum, ExponentialDecay, GridTabulated, ModeDecomposition, WhiteApprox,
                      factorize, reconstruct)
from .noise import Grid, HiddenVariables, NoiseTrajectory, noise_from_hidden, sample_hidden
from .markov import CollapseSystem, lindblad_trajectory, run_markov_ensemble
from .nonmarkov import LinearPropagator, girsanov_check, nonlinear_trajectory
from .bohm import BathConfig, TruncationWarning, integrate_bohm, integrate_bohm_ensemble, trace_out_bath
from .oracle import influence_propagate
from .scenario import load_scenario, parse_scenario
from . import _backend

backend = _backend.NAME
