"""Spiking networks for sparse coding and dictionary learning."""
