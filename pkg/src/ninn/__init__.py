"""U-Net solvers for Poisson and heat problems trained on finite-difference residuals."""

from .autodiff import Kernel, Tape, Tensor
from .fd import GridSpec, norm_2h, norm_inf, solve_elliptic, solve_parabolic
from .problems import ConfigurationError, ProblemSpec, make_problem
from .train import TrainConfig, train_elliptic, train_parabolic
from .unet import NetworkSpec, build, forward

__all__ = [
    "ConfigurationError", "GridSpec", "Kernel", "NetworkSpec", "ProblemSpec", "Tape", "Tensor",
    "TrainConfig", "build", "forward", "make_problem", "norm_2h", "norm_inf", "solve_elliptic",
    "solve_parabolic", "train_elliptic", "train_parabolic",
]
