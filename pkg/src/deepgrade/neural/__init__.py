"""Reverse-mode autodiff over numpy and the small networks built on it."""
