"""Post-training quantization with whitening-SVD error reconstruction and activation smoothing."""

__version__ = "0.1.0"
