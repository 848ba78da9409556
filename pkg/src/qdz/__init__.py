"""Quantized distillation and differentiable quantization toolkit."""

__version__ = "0.1.0"
