"""Relation-aware collaborative filtering with two-level attention and a joint relation task."""

__version__ = "0.1.0"
