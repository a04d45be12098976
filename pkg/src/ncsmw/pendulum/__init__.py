"""Simulated networked inverted-pendulum control system and experiments."""
