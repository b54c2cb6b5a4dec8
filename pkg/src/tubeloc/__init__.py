"""Sample-tube localization: detection, 2-D pose, and stereo lifting."""

__version__ = "0.1.0"
