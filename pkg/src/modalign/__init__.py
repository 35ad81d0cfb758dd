"""Per-modality instruction-aware query transformers aligned to a frozen toy LM."""

__version__ = "0.1.0"
