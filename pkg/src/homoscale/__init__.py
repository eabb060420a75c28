"""Multiscale periodic homogenization on the lifted torus."""
