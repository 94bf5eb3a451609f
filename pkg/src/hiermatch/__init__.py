"""Cross-modal hierarchical matching for fine-grained sketch-to-photo retrieval."""

__version__ = "0.1.0"
