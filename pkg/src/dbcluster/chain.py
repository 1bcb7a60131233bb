"""Idealized boosting dynamics on row-stochastic score vectors.

Each step maps every row s to s^alpha renormalized. Uniform rows are fixed
points; rows with a unique maximum converge to the indicator of that maximum.
Iteration runs in log space so large alpha^t exponents do not underflow.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

_LOG_FLOOR = -700.0  # exp(-700) is the smallest double we keep; below clamps to 0


@dataclass
class ChainState:
    rows: np.ndarray          # (m, k) row-stochastic scores
    alpha: float
    t: int = 0
    log_rows: np.ndarray = None   # unnormalized log scores; -inf marks clamps
    clamped: bool = False

    def __post_init__(self):
        self.rows = np.array(self.rows, dtype=np.float64)
        if self.rows.ndim == 1:
            self.rows = self.rows[None, :]
        if self.alpha <= 1:
            raise ConfigurationError("alpha must be > 1")
        if np.any(self.rows < 0) or np.any(
                np.abs(self.rows.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigurationError("rows must be non-negative and sum to 1")
        if self.log_rows is None:
            with np.errstate(divide="ignore"):
                self.log_rows = np.log(self.rows)


def _normalize(log_rows):
    shifted = log_rows - log_rows.max(axis=1, keepdims=True)
    clamped = bool(np.any((shifted < _LOG_FLOOR) & np.isfinite(shifted)))
    shifted = np.where(shifted < _LOG_FLOOR, -np.inf, shifted)
    rows = np.exp(shifted)
    rows /= rows.sum(axis=1, keepdims=True)
    return rows, shifted, clamped


def chain_step(state):
    """One boosting step: s'_ij = s_ij^alpha / sum_j s_ij^alpha, in log space."""
    log_rows = state.alpha * state.log_rows
    rows, log_rows, clamped = _normalize(log_rows)
    return ChainState(rows, state.alpha, state.t + 1, log_rows,
                      state.clamped or clamped)


@dataclass
class ChainRun:
    trajectory: np.ndarray              # (steps+1, m, k)
    limits: list = field(default_factory=list)  # per row: ("uniform", None) or ("indicator", l)
    steps_to_converge: list = field(default_factory=list)  # per row, None if not reached
    clamped: bool = False


def chain_run(state, max_steps, tol):
    """Iterate the chain and classify each row's limit.

    Rows that are exactly uniform stay uniform; rows with a unique maximum at
    index l head to the indicator of l, and steps_to_converge records the
    first t with s_il > 1 - tol.
    """
    if max_steps < 1:
        raise ConfigurationError("max_steps must be >= 1")
    if tol <= 0:
        raise ConfigurationError("tol must be > 0")
    m, k = state.rows.shape
    limits = []
    for row in state.rows:
        top = row.max()
        if np.all(row == top):
            limits.append(("uniform", None))
        elif np.sum(row == top) == 1:
            limits.append(("indicator", int(np.argmax(row))))
        else:
            limits.append(("tied", int(np.argmax(row))))
    converged = [None] * m
    traj = [state.rows.copy()]
    cur = state
    for _ in range(max_steps):
        cur = chain_step(cur)
        traj.append(cur.rows.copy())
        for i, (kind, l) in enumerate(limits):
            if kind == "indicator" and converged[i] is None \
                    and cur.rows[i, l] > 1 - tol:
                converged[i] = cur.t
    return ChainRun(np.stack(traj), limits, converged, cur.clamped)
