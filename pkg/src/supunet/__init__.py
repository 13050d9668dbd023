"""U-Net segmentation with a supervised fully connected bottleneck head.

Everything runs on a small float64 numpy core with hand-written
forward and vector-Jacobian kernels.
"""

from supunet.tensor import ShapeError, create, elementwise, reduce_sum
from supunet.model import ForwardOutput, ParamRegistry, UNet, UNetConfig, build

__all__ = [
    "ForwardOutput",
    "ParamRegistry",
    "ShapeError",
    "UNet",
    "UNetConfig",
    "build",
    "create",
    "elementwise",
    "reduce_sum",
]

__version__ = "0.1.0"
