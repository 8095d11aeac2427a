"""kg2mmkg: build multi-modal knowledge graphs from conventional ones."""

__version__ = "0.1.0"
