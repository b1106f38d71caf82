"""Edge-cloud cooperative 3D positioning under a fronthaul bit budget."""

__version__ = "0.1.0"
