"""Label-conditioned multi-modality MR synthesis with tumor-consistency training."""

__version__ = "0.1.0"
