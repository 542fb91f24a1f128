"""Label distribution learning with uncertainty-aware feature augmentation and TabMixer."""

__version__ = "0.1.0"
