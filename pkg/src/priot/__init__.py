"""Integer-only transfer learning by pruning frozen int8 weights."""
__version__ = "0.1.0"
