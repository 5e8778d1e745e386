"""Experiment orchestration: training loop, run types, gradient check, filter export."""
