"""Multi-concept token transformer for concept prediction and localization."""
__version__ = "0.1.0"
