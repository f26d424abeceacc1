"""Simulation and statistical checks for random overlap structures."""
