"""Experiment orchestration: configs, runs, reports and the command line."""
