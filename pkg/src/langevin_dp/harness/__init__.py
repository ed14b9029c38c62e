"""Experiment harness: risk estimation, stability measurement, reports and CLI."""
