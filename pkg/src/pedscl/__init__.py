"""Self-supervised continual learning of a pedestrian trajectory predictor."""

__version__ = "0.1.0"
