"""Cross-modal text/image embedding matching with adversarial modality alignment."""
__version__ = "0.1.0"
