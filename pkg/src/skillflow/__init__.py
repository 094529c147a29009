"""Skill-aware flow generation and skill-retrieval lifting of 2D motion flows."""

__version__ = "0.1.0"
