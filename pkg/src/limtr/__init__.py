"""Motion prediction with per-agent LiDAR features, in plain numpy."""

__version__ = "0.1.0"
