"""Multi-modality task cascade for 3D detection on synthetic RGB-D scenes."""

__version__ = "0.1.0"
