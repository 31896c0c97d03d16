"""Single-channel neonatal EEG sleep state trend pipeline."""

__version__ = "0.1.0"

from .labels import GAP, Label

__all__ = ["GAP", "Label", "__version__"]
