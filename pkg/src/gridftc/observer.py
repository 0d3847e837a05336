"""Adaptive chain-form observers with a scalar time-varying gain.

A single-output observable system is transformed into chain coordinates
(integrator chain plus a last-row remainder).  The observer corrects each
chain state with powers of one adaptive gain L and treats the remainder and
any interconnection terms as a bounded disturbance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .observability import StateSpace, kalman_rank, obsv_matrix

__all__ = [
    "ChainForm",
    "ObserverState",
    "to_chain_form",
    "gain_vector",
    "shaping_coefficients",
    "observer_step",
    "gain_update",
    "interaction_bound_estimate",
]

CHAIN_INV_TOL = 1e-10
DEFAULT_L_MAX = 1e3


@dataclass(frozen=True)
class ChainForm:
    """Change of coordinates z = T x bringing (A, C) to observer chain form.

    In the new coordinates the output is the first state, the state matrix is
    an integrator chain (ones on the superdiagonal) and all remaining linear
    dynamics are confined to the last row, exposed as ``residual_row``.  The
    input distribution in chain coordinates is ``input_chain = T B``.
    """

    n: int
    T: np.ndarray
    T_inv: np.ndarray
    residual_row: np.ndarray
    input_chain: np.ndarray  # (n, n_inputs): chain-coordinate input distribution

    def __post_init__(self):
        err = np.max(np.abs(self.T @ self.T_inv - np.eye(self.n)))
        if err > CHAIN_INV_TOL:
            raise ValueError(
                f"chain transform inverse residual {err:.3e} exceeds "
                f"{CHAIN_INV_TOL:.1e}; the pair is too close to unobservable"
            )

    def to_chain(self, x: np.ndarray) -> np.ndarray:
        return self.T @ np.asarray(x, dtype=float)

    def from_chain(self, z: np.ndarray) -> np.ndarray:
        return self.T_inv @ np.asarray(z, dtype=float)


def to_chain_form(sub: StateSpace, tol: float = 1e-9) -> ChainForm:
    """Build the chain-coordinate transform for a single-output pair.

    The transform rows are the output and its successive Lie derivatives, so
    T is exactly the observability matrix of (A, C).  Raises ``ValueError``
    when C has more than one row or the pair is unobservable at ``tol``.
    """
    if sub.C.shape[0] != 1:
        raise ValueError(
            f"chain form needs a single output row, got {sub.C.shape[0]}"
        )
    rank, ok = kalman_rank(sub.A, sub.C, tol)
    if not ok:
        raise ValueError(
            f"pair is unobservable (rank {rank} of {sub.n}); no chain form exists"
        )
    T = obsv_matrix(sub.A, sub.C)
    T_inv = np.linalg.inv(T)
    residual = (sub.C @ np.linalg.matrix_power(sub.A, sub.n) @ T_inv).ravel()
    return ChainForm(n=sub.n, T=T, T_inv=T_inv, residual_row=residual,
                     input_chain=T @ sub.B)


def shaping_coefficients(n: int, shaping: str = "binomial") -> np.ndarray:
    """Per-row multipliers a_k applied to the gain powers L^k.

    ``"binomial"`` places every frozen-gain observer pole at -L (coefficients
    of (s + L)^n).  ``"literal"`` uses plain powers a_k = 1; note that for
    n >= 3 the frozen-gain error polynomial then has all roots on the circle
    of radius L (the non-unit (n+1)-th roots of unity scaled by L), so it is
    never Hurwitz and the observer cannot converge.  It is kept selectable
    for comparison runs only.
    """
    if shaping == "binomial":
        return np.array([math.comb(n, k) for k in range(1, n + 1)], dtype=float)
    if shaping == "literal":
        return np.ones(n)
    raise ValueError(f"unknown gain shaping {shaping!r}")


def gain_vector(L: float, coeffs: np.ndarray) -> np.ndarray:
    """Correction gains [a_1 L, a_2 L^2, ..., a_n L^n]."""
    n = coeffs.shape[0]
    return coeffs * L ** np.arange(1, n + 1)


@dataclass(frozen=True)
class ObserverState:
    """State of one adaptive observer, in chain coordinates.

    ``l_value`` of ``None`` selects the self-normalizing gain law (the update
    divides by the current gain); a positive float selects the constant-l
    law.  ``shaping`` holds the per-row gain multipliers.
    """

    x_hat: np.ndarray
    L: float = 1.0
    L_max: float = DEFAULT_L_MAX
    l_value: Optional[float] = None
    shaping: np.ndarray = None

    def __post_init__(self):
        x = np.asarray(self.x_hat, dtype=float).ravel()
        object.__setattr__(self, "x_hat", x)
        if self.shaping is None:
            object.__setattr__(self, "shaping", shaping_coefficients(x.size))
        else:
            object.__setattr__(
                self, "shaping", np.asarray(self.shaping, dtype=float).ravel()
            )
        if self.shaping.size != x.size:
            raise ValueError(
                f"{self.shaping.size} shaping coefficients for {x.size} states"
            )
        if self.L < 1.0:
            raise ValueError(f"gain L must be at least 1, got {self.L}")
        if self.L > self.L_max:
            raise ValueError(f"gain L={self.L} exceeds L_max={self.L_max}")
        if self.l_value is not None and self.l_value <= 0.0:
            raise ValueError(f"constant l must be positive, got {self.l_value}")

    @property
    def n(self) -> int:
        return self.x_hat.size


def _observer_rhs(x_hat: np.ndarray, g: np.ndarray, y: float,
                  u_chain: np.ndarray) -> np.ndarray:
    dx = np.empty_like(x_hat)
    dx[:-1] = x_hat[1:]
    dx[-1] = 0.0
    dx += u_chain
    dx += g * (y - x_hat[0])
    return dx


def observer_step(obs: ObserverState, y_meas: float, u: Union[float, np.ndarray],
                  dt: float, method: str = "rk4") -> ObserverState:
    """Advance the estimate one step with the gain frozen.

    ``u`` is the input already mapped into chain coordinates: a scalar acts on
    the last chain row only (the plain chain-form case); a vector is applied
    row-wise, which covers augmented systems whose input distribution does not
    collapse onto the last row.  ``method`` is ``"rk4"`` or ``"euler"`` (the
    latter is a single forward-Euler step, intended for tests).
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not np.isfinite(y_meas):
        raise ValueError(
            "measurement is not finite; gate faulty sensors before stepping "
            "the observer"
        )
    n = obs.n
    u_chain = np.zeros(n)
    if np.isscalar(u):
        u_chain[-1] = float(u)
    else:
        u_arr = np.asarray(u, dtype=float).ravel()
        if u_arr.size != n:
            raise ValueError(f"chain input has {u_arr.size} entries, expected {n}")
        u_chain = u_arr
    g = gain_vector(obs.L, obs.shaping)
    x = obs.x_hat
    if method == "euler":
        x_next = x + dt * _observer_rhs(x, g, y_meas, u_chain)
    elif method == "rk4":
        k1 = _observer_rhs(x, g, y_meas, u_chain)
        k2 = _observer_rhs(x + 0.5 * dt * k1, g, y_meas, u_chain)
        k3 = _observer_rhs(x + 0.5 * dt * k2, g, y_meas, u_chain)
        k4 = _observer_rhs(x + dt * k3, g, y_meas, u_chain)
        x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    else:
        raise ValueError(f"unknown integration method {method!r}")
    return replace(obs, x_hat=x_next)


def gain_update(obs: ObserverState, e1: float, dt: float) -> ObserverState:
    """Forward-Euler step of the gain law L' = e1^2 / l^2, capped at L_max.

    With the self-normalizing law (``l_value`` unset) the divisor is the
    current gain, so growth slows as L rises; the gain never decreases.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    l_div = obs.L if obs.l_value is None else obs.l_value
    L_next = min(obs.L_max, obs.L + dt * e1 * e1 / (l_div * l_div))
    return replace(obs, L=L_next)


def interaction_bound_estimate(traj, min_activity: float = 1e-9) -> np.ndarray:
    """Empirical per-row constants of the triangular interaction bound.

    For each chain row k the disturbance magnitude |I_ik| is assumed bounded
    by a constant times the sum of |z_jl| over every subsystem j and chain
    index l <= k.  This scans a trajectory's logged interaction terms and true
    chain states and returns, per row, the largest observed ratio.  Samples
    where the bound's right-hand side is below ``min_activity`` are skipped.

    ``traj`` must expose ``interactions`` (samples, n_sub, n_chain) and
    ``chain_true`` with the same shape.
    """
    inter = getattr(traj, "interactions", None)
    chain = getattr(traj, "chain_true", None)
    if inter is None or chain is None or len(inter) == 0:
        raise ValueError(
            "trajectory carries no interaction diagnostics; run the scenario "
            "with diagnostics enabled"
        )
    inter = np.asarray(inter, dtype=float)
    chain = np.asarray(chain, dtype=float)
    if inter.shape != chain.shape:
        raise ValueError(
            f"interaction log shape {inter.shape} != chain state log {chain.shape}"
        )
    n_chain = inter.shape[2]
    # rhs[s, k] = sum over subsystems of |z_1..z_k|, cumulative in k
    rhs = np.cumsum(np.sum(np.abs(chain), axis=1), axis=1)
    peak = np.abs(inter).max(axis=1)  # worst subsystem per sample and row
    out = np.zeros(n_chain)
    for k in range(n_chain):
        mask = rhs[:, k] > min_activity
        if np.any(mask):
            out[k] = float(np.max(peak[mask, k] / rhs[mask, k]))
    return out
