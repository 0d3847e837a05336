"""Third-order multi-machine power system model.

Each generator is represented by rotor angle deviation, speed deviation and
transient quadrature-axis EMF deviation, coupled through a reduced network
described by conductance and susceptance matrices.  All quantities are in
per unit except angles (rad) and time (s).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

__all__ = [
    "GeneratorParams",
    "NetworkModel",
    "OperatingPoint",
    "LinearizedPlant",
    "PlantModel",
    "EquilibriumError",
    "currents",
    "electrical_power",
    "derivatives",
    "verify_equilibrium",
    "linearize",
    "linearize_closed_form",
    "construct_equilibrium",
    "refine_equilibrium",
    "load_plant",
    "save_plant",
]

N_STATES = 3  # angle, speed, transient EMF (deviations per machine)


class EquilibriumError(ValueError):
    """Raised when an operating point fails the equilibrium check.

    Carries the offending residual infinity-norm in ``residual``.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = float(residual)


@dataclass(frozen=True)
class GeneratorParams:
    """Constants of a single synchronous generator.

    Attributes
    ----------
    D : damping coefficient (p.u.)
    H : inertia constant (s)
    omega0 : synchronous electrical speed (rad/s)
    Pm : mechanical input power (p.u.), constant over the horizon
    Tdo_prime : d-axis transient open-circuit time constant (s)
    xd : d-axis synchronous reactance (p.u.)
    xd_prime : d-axis transient reactance (p.u.)
    xad : mutual reactance between excitation coil and stator (p.u.)
    """

    D: float
    H: float
    omega0: float
    Pm: float
    Tdo_prime: float
    xd: float
    xd_prime: float
    xad: float

    def __post_init__(self):
        if self.H <= 0.0:
            raise ValueError(f"inertia constant H must be positive, got {self.H}")
        if self.Tdo_prime <= 0.0:
            raise ValueError(f"Tdo_prime must be positive, got {self.Tdo_prime}")
        if not (self.xd > self.xd_prime > 0.0):
            raise ValueError(
                f"reactances must satisfy xd > xd_prime > 0, got xd={self.xd}, "
                f"xd_prime={self.xd_prime}"
            )
        if self.xad <= 0.0:
            raise ValueError(f"xad must be positive, got {self.xad}")
        if self.D < 0.0:
            raise ValueError(f"damping D must be non-negative, got {self.D}")
        if self.omega0 <= 0.0:
            raise ValueError(f"omega0 must be positive, got {self.omega0}")


@dataclass(frozen=True)
class NetworkModel:
    """Reduced network: conductance G and susceptance B matrices (p.u.)."""

    G: np.ndarray
    B: np.ndarray

    _SYM_TOL = 1e-9

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        B = np.asarray(self.B, dtype=float)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "B", B)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError(f"G must be square, got shape {G.shape}")
        if B.shape != G.shape:
            raise ValueError(f"B shape {B.shape} does not match G shape {G.shape}")
        for name, M in (("G", G), ("B", B)):
            if not np.all(np.isfinite(M)):
                raise ValueError(f"{name} contains non-finite entries")
            dev = np.max(np.abs(M - M.T)) if M.size else 0.0
            if dev > self._SYM_TOL:
                raise ValueError(
                    f"{name} is not symmetric: max |{name} - {name}^T| = {dev:.3e}"
                )

    @property
    def n(self) -> int:
        return self.G.shape[0]


@dataclass(frozen=True)
class OperatingPoint:
    """Steady-state absolute angles, transient EMFs and field voltages."""

    delta0: np.ndarray
    Eq_prime0: np.ndarray
    Ef0: np.ndarray

    def __post_init__(self):
        for name in ("delta0", "Eq_prime0", "Ef0"):
            v = np.asarray(getattr(self, name), dtype=float).ravel()
            object.__setattr__(self, name, v)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} contains non-finite entries")
        if not (self.delta0.shape == self.Eq_prime0.shape == self.Ef0.shape):
            raise ValueError(
                "operating point vectors must share one length, got "
                f"{self.delta0.shape}, {self.Eq_prime0.shape}, {self.Ef0.shape}"
            )

    @property
    def n(self) -> int:
        return self.delta0.shape[0]


@dataclass(frozen=True)
class LinearizedPlant:
    """Block-structured linearization around an operating point.

    ``A[i]`` is the 3x3 own-dynamics block of subsystem ``i``; ``Gint[i, j]``
    couples subsystem ``j``'s states into subsystem ``i``'s dynamics.  Input
    columns ``Bsub[i]`` act on the field voltage channel; output rows
    ``Csub[i]`` select the measured angle deviation.
    """

    A: np.ndarray      # (n, 3, 3)
    Gint: np.ndarray   # (n, n, 3, 3); Gint[i, i] == 0
    Bsub: np.ndarray   # (n, 3)
    Csub: np.ndarray   # (n, 1, 3)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def full_matrix(self) -> np.ndarray:
        """Assemble the full (3n, 3n) state matrix from blocks."""
        n = self.n
        full = np.zeros((N_STATES * n, N_STATES * n))
        for i in range(n):
            ri = slice(N_STATES * i, N_STATES * (i + 1))
            full[ri, ri] = self.A[i]
            for j in range(n):
                if j == i:
                    continue
                cj = slice(N_STATES * j, N_STATES * (j + 1))
                full[ri, cj] = self.Gint[i, j]
        return full

    def full_input(self) -> np.ndarray:
        """Block-diagonal (3n, n) input matrix."""
        n = self.n
        B = np.zeros((N_STATES * n, n))
        for i in range(n):
            B[N_STATES * i : N_STATES * (i + 1), i] = self.Bsub[i]
        return B

    def full_output(self) -> np.ndarray:
        """Block-diagonal (n, 3n) output matrix."""
        n = self.n
        C = np.zeros((n, N_STATES * n))
        for i in range(n):
            C[i, N_STATES * i : N_STATES * (i + 1)] = self.Csub[i, 0]
        return C


def _as_state(x, n: int) -> np.ndarray:
    """Normalize a state vector to shape (n, 3), validating dimensions."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        if arr.size != N_STATES * n:
            raise ValueError(
                f"state has {arr.size} entries, expected {N_STATES * n} "
                f"for {n} subsystems"
            )
        arr = arr.reshape(n, N_STATES)
    elif arr.shape != (n, N_STATES):
        raise ValueError(f"state shape {arr.shape} != ({n}, {N_STATES})")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise ValueError(f"state contains non-finite entry at subsystem index {bad[0]}")
    return arr


def _param_arrays(params: Sequence[GeneratorParams]):
    """Stack per-generator constants into arrays for vectorized evaluation."""
    return {
        "D": np.array([p.D for p in params]),
        "H": np.array([p.H for p in params]),
        "omega0": np.array([p.omega0 for p in params]),
        "Pm": np.array([p.Pm for p in params]),
        "Tdo": np.array([p.Tdo_prime for p in params]),
        "xd": np.array([p.xd for p in params]),
        "xdp": np.array([p.xd_prime for p in params]),
    }


def currents(state, op: OperatingPoint, net: NetworkModel):
    """Direct- and quadrature-axis currents injected by the network.

    Returns ``(Id, Iq)`` where
    ``Id_i = sum_j E'_qj (G_ij sin(d_ij) - B_ij cos(d_ij))`` and
    ``Iq_i = sum_j E'_qj (B_ij sin(d_ij) + G_ij cos(d_ij))`` with
    ``d_ij = delta_i - delta_j`` built from absolute angles.
    """
    n = net.n
    if op.n != n:
        raise ValueError(f"operating point has {op.n} machines, network has {n}")
    x = _as_state(state, n)
    delta = op.delta0 + x[:, 0]
    E = op.Eq_prime0 + x[:, 2]
    dij = delta[:, None] - delta[None, :]
    sin_d = np.sin(dij)
    cos_d = np.cos(dij)
    Id = (net.G * sin_d - net.B * cos_d) @ E
    Iq = (net.B * sin_d + net.G * cos_d) @ E
    return Id, Iq


def electrical_power(state, op: OperatingPoint, net: NetworkModel):
    """Active and reactive electrical power ``(Pe, Qe)`` per machine.

    ``Pe_i = E'_qi Iq_i`` and ``Qe_i = E'_qi Id_i``.
    """
    x = _as_state(state, net.n)
    E = op.Eq_prime0 + x[:, 2]
    Id, Iq = currents(x, op, net)
    return E * Iq, E * Id


def _rhs_core(x, u, pa, delta0, E0, G, B):
    """Unvalidated deviation-dynamics right-hand side (hot-loop form).

    ``x`` is (n, 3), ``u`` the absolute field EMFs (n,), ``pa`` a stacked
    parameter dict.  The simulation engine calls this once per integrator
    substage; :func:`derivatives` wraps it with input validation.
    """
    delta = delta0 + x[:, 0]
    E = E0 + x[:, 2]
    dij = delta[:, None] - delta[None, :]
    sin_d = np.sin(dij)
    cos_d = np.cos(dij)
    Id = (G * sin_d - B * cos_d) @ E
    Iq = (B * sin_d + G * cos_d) @ E
    Pe = E * Iq
    Eq = E + (pa["xd"] - pa["xdp"]) * Id
    dx = np.empty_like(x)
    dx[:, 0] = x[:, 1]
    dx[:, 1] = -(pa["D"] / (2.0 * pa["H"])) * x[:, 1] \
        + (pa["omega0"] / (2.0 * pa["H"])) * (pa["Pm"] - Pe)
    dx[:, 2] = (u - Eq) / pa["Tdo"]
    return dx


def derivatives(state, u, params: Sequence[GeneratorParams],
                op: OperatingPoint, net: NetworkModel) -> np.ndarray:
    """Time derivative of the deviation state under field voltages ``u``.

    ``u`` holds the absolute field EMFs (p.u., one per machine).  Rows of the
    result are ``[d(delta)/dt, d(omega)/dt, d(E'_q)/dt]`` per machine:

        d(delta_i)/dt = omega_i
        d(omega_i)/dt = -(D_i / 2H_i) omega_i + (omega0_i / 2H_i)(Pm_i - Pe_i)
        d(E'_qi)/dt   = (u_i - E_qi) / T'_doi,  E_qi = E'_qi + (xd_i - x'_di) Id_i
    """
    n = net.n
    x = _as_state(state, n)
    u = np.asarray(u, dtype=float).ravel()
    if u.size != n:
        raise ValueError(f"u has {u.size} entries, expected {n}")
    pa = params if isinstance(params, dict) else _param_arrays(params)
    return _rhs_core(x, u, pa, op.delta0, op.Eq_prime0, net.G, net.B)


def verify_equilibrium(op: OperatingPoint, params: Sequence[GeneratorParams],
                       net: NetworkModel, u0=None) -> float:
    """Infinity-norm of the state derivative at zero deviation.

    ``u0`` defaults to the operating point's field voltages.
    """
    if u0 is None:
        u0 = op.Ef0
    zero = np.zeros((net.n, N_STATES))
    dx = derivatives(zero, u0, params, op, net)
    return float(np.max(np.abs(dx)))


def _trig_kernels(op: OperatingPoint, net: NetworkModel):
    dij = op.delta0[:, None] - op.delta0[None, :]
    sin_d = np.sin(dij)
    cos_d = np.cos(dij)
    # d(Iq)/dE and d(Id)/d(delta) share one kernel; d(Id)/dE and d(Iq)/d(delta)
    # pair with the other two.
    Pq = net.B * sin_d + net.G * cos_d
    Md = net.G * sin_d - net.B * cos_d
    Mq = net.B * cos_d - net.G * sin_d
    return Pq, Md, Mq


def linearize(op: OperatingPoint, params: Sequence[GeneratorParams],
              net: NetworkModel, eq_tol: float = 1e-6) -> LinearizedPlant:
    """Analytic Jacobian of the nonlinear dynamics at an operating point.

    The operating point must be an equilibrium (residual at most ``eq_tol``);
    otherwise an :class:`EquilibriumError` is raised.  Returns per-subsystem
    own-dynamics blocks, interaction blocks, input columns and output rows.
    """
    n = net.n
    residual = verify_equilibrium(op, params, net)
    if residual > eq_tol:
        raise EquilibriumError(
            f"operating point is not an equilibrium: residual {residual:.3e} "
            f"exceeds tolerance {eq_tol:.3e}",
            residual,
        )
    pa = _param_arrays(params)
    E = op.Eq_prime0
    _, Iq = currents(np.zeros((n, N_STATES)), op, net)
    Pq, Md, Mq = _trig_kernels(op, net)

    c = pa["omega0"] / (2.0 * pa["H"])
    d = (pa["xd"] - pa["xdp"]) / pa["Tdo"]

    off = ~np.eye(n, dtype=bool)
    # Own-block sensitivities sum over foreign machines only: the i == j term
    # of each current sum is constant in delta_i.
    dIq_ddi = np.sum(np.where(off, Mq * E[None, :], 0.0), axis=1)
    dId_ddi = np.sum(np.where(off, Pq * E[None, :], 0.0), axis=1)
    dPe_ddi = E * dIq_ddi
    dPe_dEi = Iq + E * np.diag(net.G)
    dId_dEi = np.diag(Md)

    A = np.zeros((n, N_STATES, N_STATES))
    A[:, 0, 1] = 1.0
    A[:, 1, 0] = -c * dPe_ddi
    A[:, 1, 1] = -pa["D"] / (2.0 * pa["H"])
    A[:, 1, 2] = -c * dPe_dEi
    A[:, 2, 0] = -d * dId_ddi
    A[:, 2, 2] = -(1.0 + (pa["xd"] - pa["xdp"]) * dId_dEi) / pa["Tdo"]

    Gint = np.zeros((n, n, N_STATES, N_STATES))
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            Gint[i, j, 1, 0] = c[i] * E[i] * Mq[i, j] * E[j]
            Gint[i, j, 1, 2] = -c[i] * E[i] * Pq[i, j]
            Gint[i, j, 2, 0] = d[i] * Pq[i, j] * E[j]
            Gint[i, j, 2, 2] = -d[i] * Md[i, j]

    Bsub = np.zeros((n, N_STATES))
    Bsub[:, 2] = 1.0 / pa["Tdo"]
    Csub = np.zeros((n, 1, N_STATES))
    Csub[:, 0, 0] = 1.0
    return LinearizedPlant(A=A, Gint=Gint, Bsub=Bsub, Csub=Csub)


def linearize_closed_form(op: OperatingPoint, params: Sequence[GeneratorParams],
                          net: NetworkModel) -> LinearizedPlant:
    """Alternate closed-form coefficient table, kept only as a cross-check.

    This evaluates a legacy hand-derived coefficient set.  Its speed-row and
    EMF-decay entries (``A[i, 1, 1]`` and ``A[i, 2, 2]``) agree with
    :func:`linearize`; the remaining entries keep network diagonal terms
    inside the angle sums and omit the synchronous-speed scaling, so they do
    not reproduce the Jacobian and must not be used for simulation or design.
    """
    n = net.n
    pa = _param_arrays(params)
    E = op.Eq_prime0
    dij = op.delta0[:, None] - op.delta0[None, :]
    sin_d = np.sin(dij)
    cos_d = np.cos(dij)
    kd = net.G * sin_d - net.B * cos_d   # d-axis kernel
    kq = net.B * sin_d + net.G * cos_d   # q-axis kernel
    twoH = 2.0 * pa["H"]

    A = np.zeros((n, N_STATES, N_STATES))
    A[:, 0, 1] = 1.0
    A[:, 1, 0] = (1.0 / twoH) * ((kd * (E[:, None] * E[None, :])).sum(axis=1))
    A[:, 1, 1] = -pa["D"] / twoH
    A[:, 1, 2] = -np.diag(net.G) * E / pa["H"] - (kq @ E) / twoH
    A[:, 2, 0] = -((pa["xd"] - pa["xdp"]) / pa["Tdo"]) * (kq @ E)
    A[:, 2, 2] = -1.0 / pa["Tdo"] + (pa["xd"] - pa["xdp"]) * np.diag(net.B) / pa["Tdo"]

    Gint = np.zeros((n, n, N_STATES, N_STATES))
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            Gint[i, j, 1, 0] = E[i] * E[j] * kd[i, j] / twoH[i]
            Gint[i, j, 1, 2] = -E[i] * kq[i, j] / twoH[i]
            Gint[i, j, 2, 0] = -((pa["xd"][i] - pa["xdp"][i]) / pa["Tdo"][i]) \
                * E[j] * kq[i, j]
            Gint[i, j, 2, 2] = -((pa["xd"][i] - pa["xdp"][i]) / pa["Tdo"][i]) \
                * kd[i, j]

    Bsub = np.zeros((n, N_STATES))
    Bsub[:, 2] = 1.0 / pa["Tdo"]
    Csub = np.zeros((n, 1, N_STATES))
    Csub[:, 0, 0] = 1.0
    return LinearizedPlant(A=A, Gint=Gint, Bsub=Bsub, Csub=Csub)


def construct_equilibrium(delta0, Eq_prime0, params: Sequence[GeneratorParams],
                          net: NetworkModel):
    """Build an exact equilibrium at prescribed angles and EMFs.

    Sets each machine's mechanical power to the electrical power drawn at the
    point and each field voltage to the steady synchronous EMF.  Returns
    ``(new_params, OperatingPoint)``.
    """
    delta0 = np.asarray(delta0, dtype=float).ravel()
    Eq_prime0 = np.asarray(Eq_prime0, dtype=float).ravel()
    op_probe = OperatingPoint(delta0=delta0, Eq_prime0=Eq_prime0,
                              Ef0=np.zeros_like(delta0))
    zero = np.zeros((net.n, N_STATES))
    Id, Iq = currents(zero, op_probe, net)
    Pe = Eq_prime0 * Iq
    xd = np.array([p.xd for p in params])
    xdp = np.array([p.xd_prime for p in params])
    Ef0 = Eq_prime0 + (xd - xdp) * Id
    new_params = [replace(p, Pm=float(Pe[i])) for i, p in enumerate(params)]
    op = OperatingPoint(delta0=delta0, Eq_prime0=Eq_prime0, Ef0=Ef0)
    return new_params, op


def refine_equilibrium(params: Sequence[GeneratorParams], net: NetworkModel,
                       guess: OperatingPoint, tol: float = 1e-10,
                       max_iter: int = 50):
    """Damped Newton refinement of an operating point.

    Holds the field voltages and all mechanical powers except machine 0's
    fixed (machine 0 absorbs the power mismatch, the usual slack convention)
    and solves for angles ``delta_1..delta_{n-1}`` relative to the fixed
    reference ``delta_0`` plus all EMFs.  Returns ``(new_params, op)`` with
    the slack machine's ``Pm`` replaced so the point is an exact equilibrium.
    """
    n = net.n
    pa = _param_arrays(params)
    Ef = guess.Ef0.copy()
    ref = guess.delta0[0]

    def residual(z):
        delta = np.concatenate(([ref], z[: n - 1]))
        E = z[n - 1 :]
        op = OperatingPoint(delta0=delta, Eq_prime0=E, Ef0=Ef)
        Id, Iq = currents(np.zeros((n, N_STATES)), op, net)
        Pe = E * Iq
        Eq = E + (pa["xd"] - pa["xdp"]) * Id
        return np.concatenate([Pe[1:] - pa["Pm"][1:], Eq - Ef])

    z = np.concatenate([guess.delta0[1:], guess.Eq_prime0])
    r = residual(z)
    for _ in range(max_iter):
        if np.max(np.abs(r)) <= tol:
            break
        # forward-difference Jacobian; the system is small and smooth
        h = 1e-7
        J = np.empty((z.size, z.size))
        for k in range(z.size):
            zp = z.copy()
            zp[k] += h
            J[:, k] = (residual(zp) - r) / h
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise EquilibriumError(
                f"Newton iteration hit a singular Jacobian: {exc}",
                float(np.max(np.abs(r))),
            ) from exc
        lam = 1.0
        base = np.max(np.abs(r))
        while lam > 1e-6:
            z_try = z + lam * step
            r_try = residual(z_try)
            if np.max(np.abs(r_try)) < base:
                z, r = z_try, r_try
                break
            lam *= 0.5
        else:
            raise EquilibriumError(
                "Newton iteration stalled: no damping factor reduced the "
                f"residual below {base:.3e}",
                base,
            )
    else:
        raise EquilibriumError(
            f"Newton iteration did not converge within {max_iter} steps, "
            f"residual {np.max(np.abs(r)):.3e}",
            float(np.max(np.abs(r))),
        )

    delta = np.concatenate(([ref], z[: n - 1]))
    E = z[n - 1 :]
    op = OperatingPoint(delta0=delta, Eq_prime0=E, Ef0=Ef)
    Id, Iq = currents(np.zeros((n, N_STATES)), op, net)
    new_params = list(params)
    new_params[0] = replace(params[0], Pm=float(E[0] * Iq[0]))
    return new_params, op


@dataclass(frozen=True)
class PlantModel:
    """A complete plant: generator constants, network and operating point."""

    generators: tuple
    network: NetworkModel
    op: OperatingPoint
    name: str = "plant"

    def __post_init__(self):
        gens = tuple(self.generators)
        object.__setattr__(self, "generators", gens)
        if len(gens) != self.network.n:
            raise ValueError(
                f"{len(gens)} generators but network is {self.network.n}x"
                f"{self.network.n}"
            )
        if self.op.n != self.network.n:
            raise ValueError(
                f"operating point covers {self.op.n} machines, network has "
                f"{self.network.n}"
            )

    @property
    def n(self) -> int:
        return self.network.n

    def derivatives(self, state, u):
        return derivatives(state, u, self.generators, self.op, self.network)

    def verify_equilibrium(self) -> float:
        return verify_equilibrium(self.op, self.generators, self.network)

    def linearize(self, eq_tol: float = 1e-6) -> LinearizedPlant:
        return linearize(self.op, self.generators, self.network, eq_tol=eq_tol)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "generators": [
                {
                    "D": p.D, "H": p.H, "omega0": p.omega0, "Pm": p.Pm,
                    "Tdo_prime": p.Tdo_prime, "xd": p.xd,
                    "xd_prime": p.xd_prime, "xad": p.xad,
                }
                for p in self.generators
            ],
            "network": {
                "G": self.network.G.tolist(),
                "B": self.network.B.tolist(),
            },
            "operating_point": {
                "delta0": self.op.delta0.tolist(),
                "Eq_prime0": self.op.Eq_prime0.tolist(),
                "Ef0": self.op.Ef0.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlantModel":
        try:
            gens = tuple(GeneratorParams(**g) for g in d["generators"])
            net = NetworkModel(G=np.array(d["network"]["G"], dtype=float),
                               B=np.array(d["network"]["B"], dtype=float))
            opd = d["operating_point"]
            op = OperatingPoint(delta0=np.array(opd["delta0"], dtype=float),
                                Eq_prime0=np.array(opd["Eq_prime0"], dtype=float),
                                Ef0=np.array(opd["Ef0"], dtype=float))
        except KeyError as exc:
            raise ValueError(f"plant description is missing field {exc}") from exc
        return cls(generators=gens, network=net, op=op,
                   name=d.get("name", "plant"))


def load_plant(path) -> PlantModel:
    """Read a plant description from a JSON file."""
    with open(path) as fh:
        return PlantModel.from_dict(json.load(fh))


def save_plant(plant: PlantModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(plant.to_dict(), fh, indent=2)
        fh.write("\n")
