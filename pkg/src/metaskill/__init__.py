"""Skill assessment from feature sequences via episodic meta-learning."""

__version__ = "0.1.0"
