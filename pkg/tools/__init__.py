"""Tools package for particle system simulation and convergence studies."""
