"""Vector-quantized completion of occluded 2D turbulence fields."""

__version__ = "0.1.0"
