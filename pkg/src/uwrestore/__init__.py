"""Underwater image restoration guided by medium-transmission maps.

Subpackages: a numpy-backed autodiff tensor engine (``autodiff``, ``optim``),
image I/O and color conversion (``imaging``), the physical degradation model
and its dark-channel inverse (``physics``), the two-branch restoration
network (``network``), dataset synthesis and training (``training``),
quality metrics (``metrics``), and a command-line front end (``cli``).
"""

__version__ = "0.1.0"

from .imaging import ImageGray, ImageRGB, load_image, save_image
from .network import MTURConfig, MTURModel, build, forward
from .physics import Airlight, PhysicsParams, TransmissionMap

__all__ = [
    "ImageGray",
    "ImageRGB",
    "load_image",
    "save_image",
    "MTURConfig",
    "MTURModel",
    "build",
    "forward",
    "Airlight",
    "PhysicsParams",
    "TransmissionMap",
    "__version__",
]
