"""RIA: adversarial label-invariant augmentation for OoD graph classification."""

__version__ = "0.1.0"
