"""Synthetic worlds, ground truth, evaluation, experiments and plots."""
