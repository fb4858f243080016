"""Two-stage temporal action localization with receptive-field aligned proposal towers."""

__version__ = "0.1.0"
