"""Open-world object detection with decoupled objectness and auxiliary box supervision."""

__version__ = "0.1.0"
