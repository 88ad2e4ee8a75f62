"""Exception hierarchy; the CLI maps each class to an exit code."""
from __future__ import annotations


class SteerlabError(Exception):
    exit_code = 1


class ValidationError(SteerlabError, ValueError):
    """Bad input: schema violations, shape mismatches, degenerate directions."""

    exit_code = 2


class ShapeError(ValidationError):
    pass


class DegenerateDirectionError(ValidationError):
    def __init__(self, layer: int, step: int, norm: float):
        super().__init__(f"degenerate direction at layer={layer} step={step}: |mean_pos - mean_neg| = {norm:.3e}")
        self.layer = layer
        self.step = step
        self.norm = norm


class OracleRejected(ValidationError):
    pass


class NumericError(SteerlabError, FloatingPointError):
    """A NaN or Inf escaped a computation."""

    exit_code = 3
