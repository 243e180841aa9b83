"""Anatomy-prior channel attention for chest x-ray classification and
weakly-supervised lesion localization."""

__version__ = "0.1.0"
