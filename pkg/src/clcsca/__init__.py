"""Cross-level cross-scale cross-attention networks for point clouds, in NumPy.

The package is a small, self-contained stack: a reverse-mode autodiff
:mod:`~clcsca.tensor`, canonical point-set :mod:`~clcsca.geometry`, the feature
:mod:`~clcsca.pyramid`, the :mod:`~clcsca.attention` blocks, the assembled
:mod:`~clcsca.model`, and :mod:`~clcsca.train` / :mod:`~clcsca.data` around it.
"""

from .errors import ContractError, DataError, FormatError, ShapeError
from .geometry import PointCloud
from .model import Model, NetworkConfig
from .tensor import Tensor
from .train import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DataError",
    "FormatError",
    "Model",
    "NetworkConfig",
    "PointCloud",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "fit",
]
