"""Simulation, training, inference and experiment services."""
