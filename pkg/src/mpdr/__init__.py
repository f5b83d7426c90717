"""Dense-retrieval training with multiple positive passages per query."""

__version__ = "0.1.0"
