"""Double JPEG compression detection: JPEG simulation, detector CNNs, training and localization."""

__version__ = "0.1.0"
