"""Staged training, baseline evaluation and reporting."""
