"""Lane-change scenario mining and adversarial scenario generation."""

__version__ = "0.1.0"
