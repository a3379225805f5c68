"""Physics-embedded recurrent-convolutional learning of PDE dynamics.

Generate ground-truth trajectories with a finite-difference solver, corrupt
and subsample them into sparse measurements, fit the recurrent product-block
model with its hard-embedded diffusion physics, evaluate extrapolation, and
read the learned dynamics back out as a polynomial.
"""

from .errors import (
    BlowUpError,
    ConfigError,
    CorruptFileError,
    FileFormatError,
    PercnnError,
    TrainingDivergedError,
    UninterpretableModelError,
    UnrecognizedFormatError,
)
from .fields import (
    Dirichlet,
    Field,
    GridSpec,
    Neumann,
    PERIODIC,
    Periodic,
    Trajectory,
    add_noise,
    crop,
    downsample,
    interpolate,
    pad,
)
from .fileio import load_field, load_traj, save_field, save_traj
from .model import (
    HighwayConfig,
    IsgConfig,
    ModelConfig,
    PercnnModel,
    PiBlockConfig,
    predict,
    rollout,
)
from .solver import PdeSystem, burgers_2d, default_ic, generate, gray_scott_2d, gray_scott_3d
from .training import TrainConfig, estimate_diffusion, train

__version__ = "0.1.0"
