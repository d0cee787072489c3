"""Dense bundle adjustment SLAM core with a synthetic flow oracle."""

__version__ = "0.1.0"
