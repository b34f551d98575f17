"""Conditional atlas learning engine: jointly trains a condition-parameterized
intensity/label template and a diffeomorphic registration model, adversarially,
and evaluates on synthetic conditional phantoms."""

__version__ = "0.1.0"
