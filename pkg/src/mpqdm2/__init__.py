"""Low-bit mixed-precision quantization toolkit with residual quantizers,
low-rank adapter initialization and temporal relation distillation."""

__version__ = "0.1.0"
