"""Post-training quantization of two-way cross-attention decoders."""

__version__ = "0.1.0"
