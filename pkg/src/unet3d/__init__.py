"""3D U-Net for multi-organ CT segmentation, in numpy."""
from .tensor import Tensor
from .unet import UNetConfig, build, count_params, forward

__version__ = "0.1.0"
__all__ = ["Tensor", "UNetConfig", "build", "count_params", "forward", "__version__"]
