"""Drift-randomised Milstein schemes for interacting particle systems and studies."""
