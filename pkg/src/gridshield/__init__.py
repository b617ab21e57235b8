"""gridshield: physics-informed state estimation under stealthy AC false data injection."""

__version__ = "0.1.0"
