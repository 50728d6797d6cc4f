"""Edge-cloud video caching and delivery workbench."""

__version__ = "0.1.0"
