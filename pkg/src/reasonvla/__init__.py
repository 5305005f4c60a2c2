"""Reasoning-supervised vision-language-action toolkit for a toy tabletop."""

__version__ = "0.1.0"
