"""Sensor-fault reconfiguration: virtual sensors and subsystem augmentation.

When a subsystem keeps enough output information after a sensor fault, its
measurement vector is rebuilt from the surviving rows plus the observer
estimate (virtual sensor).  When observability is lost outright, the faulty
subsystem is merged with neighbours until the merged system is observable
from the neighbours' sensors; candidate sets are screened structurally,
numerically and for stability, then ranked by a Gramian-based cost.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .observability import (
    CostReport,
    StateSpace,
    ZeroPattern,
    UnstableSystemError,
    cascade_observable,
    cost_J,
    hf_norm_sq,
    is_hurwitz,
    kalman_rank,
    obs_gramian,
    structurally_observable,
)
from .observer import ChainForm, to_chain_form
from .power_model import N_STATES, LinearizedPlant

__all__ = [
    "FaultEvent",
    "AugmentedSystem",
    "ObserverSpec",
    "ReconfigPlan",
    "default_P",
    "virtual_sensor",
    "fault_output_map",
    "augment",
    "evaluate_candidate",
    "rftc_select",
    "build_observer_bank",
]

log = logging.getLogger(__name__)

FAULT_KINDS = ("gain", "stuck", "total-loss")

MODE_VIRTUAL_SENSOR = "virtual-sensor"
MODE_AUGMENTATION = "augmentation"
MODE_UNRECOVERABLE = "unrecoverable"


@dataclass(frozen=True)
class FaultEvent:
    """One sensor fault: location, kind and detection latency.

    ``subsystem`` is 1-based.  ``factor`` is required for gain faults;
    ``stuck_value`` optionally pins a stuck sensor to a fixed reading
    (otherwise it holds its last pre-fault value).  ``fdi_delay`` is the time
    the diagnosis layer needs before the fault location and magnitude become
    available to the reconfiguration logic.
    """

    t_fault: float
    subsystem: int
    kind: str
    fdi_delay: float
    sensor_row: int = 0
    factor: Optional[float] = None
    stuck_value: Optional[float] = None

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(
                f"unknown fault kind {self.kind!r}; expected one of {FAULT_KINDS}"
            )
        if self.t_fault < 0.0:
            raise ValueError(f"t_fault must be non-negative, got {self.t_fault}")
        if self.fdi_delay < 0.0:
            raise ValueError(f"fdi_delay must be non-negative, got {self.fdi_delay}")
        if self.subsystem < 1:
            raise ValueError(f"subsystem ids are 1-based, got {self.subsystem}")
        if self.kind == "gain" and self.factor is None:
            raise ValueError("gain faults require a factor")
        if self.sensor_row < 0:
            raise ValueError(f"sensor_row must be non-negative, got {self.sensor_row}")

    def to_dict(self) -> dict:
        return {
            "t_fault": self.t_fault,
            "subsystem": self.subsystem,
            "kind": self.kind,
            "fdi_delay": self.fdi_delay,
            "sensor_row": self.sensor_row,
            "factor": self.factor,
            "stuck_value": self.stuck_value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaultEvent":
        known = {"t_fault", "subsystem", "kind", "fdi_delay", "sensor_row",
                 "factor", "stuck_value"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown fault event fields: {sorted(extra)}")
        return cls(**d)


def default_P(C, faulty_rows) -> np.ndarray:
    """Identity selector with the faulty sensor rows zeroed."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    p = C.shape[0]
    P = np.eye(p)
    for r in faulty_rows:
        if not 0 <= r < p:
            raise ValueError(f"faulty row {r} out of range for {p} output rows")
        P[r, r] = 0.0
    return P


def virtual_sensor(y_f, x_hat, C, C_f, P) -> np.ndarray:
    """Reconstructed output: trusted rows pass through, the rest come from
    the estimate.

    Computes ``P y_f + (C - P C_f) x_hat``.  When the estimate is exact and
    P annihilates every corrupted row, the reconstruction equals the healthy
    output C x regardless of the fault map C_f.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    C_f = np.atleast_2d(np.asarray(C_f, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    y_f = np.asarray(y_f, dtype=float).ravel()
    x_hat = np.asarray(x_hat, dtype=float).ravel()
    p, m = C.shape
    if C_f.shape != (p, m):
        raise ValueError(f"C_f shape {C_f.shape} does not match C shape {C.shape}")
    if P.shape != (p, p):
        raise ValueError(f"P shape {P.shape} must be ({p}, {p})")
    if y_f.size != p:
        raise ValueError(f"y_f has {y_f.size} entries, expected {p}")
    if x_hat.size != m:
        raise ValueError(f"x_hat has {x_hat.size} entries, expected {m}")
    return P @ y_f + (C - P @ C_f) @ x_hat


def fault_output_map(fault: FaultEvent, C: np.ndarray) -> np.ndarray:
    """Post-fault output matrix for a subsystem with healthy output map C.

    Gain faults scale the affected row; stuck and total-loss faults leave no
    state information in it, so the row is zeroed.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    C_f = C.copy()
    r = fault.sensor_row
    if r >= C.shape[0]:
        raise ValueError(
            f"fault addresses sensor row {r} but the subsystem has "
            f"{C.shape[0]} output rows"
        )
    if fault.kind == "gain":
        C_f[r, :] *= fault.factor
    else:
        C_f[r, :] = 0.0
    return C_f


@dataclass(frozen=True)
class AugmentedSystem:
    """State-space blocks of a merged candidate subsystem set.

    States are laid out member-by-member in the order of ``ids`` (the faulty
    subsystem first).  ``C`` has the faulty member's output rows zeroed;
    ``C_healthy`` keeps them intact for functionality-gap evaluation.
    ``index_map`` maps each 1-based subsystem id to its state slice.
    """

    ids: tuple
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    C_healthy: np.ndarray
    index_map: dict
    faulty_id: int

    @property
    def dim(self) -> int:
        return self.A.shape[0]


def augment(ids: Sequence[int], lin: LinearizedPlant, faulty_id: int,
            faulty_rows: Optional[Sequence[int]] = None) -> AugmentedSystem:
    """Assemble the merged state space for a candidate subsystem set.

    ``ids`` are 1-based and must contain ``faulty_id``.  Own-dynamics blocks
    go on the diagonal and interaction blocks fill the off-diagonal; inputs
    and outputs are block-diagonal.  ``faulty_rows`` restricts the zeroed
    output rows of the faulty member (default: all of them, the total-loss
    case).
    """
    ids = tuple(int(i) for i in ids)
    n = lin.n
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate subsystem ids in {ids}")
    for i in ids:
        if not 1 <= i <= n:
            raise ValueError(f"unknown subsystem id {i}; plant has 1..{n}")
    if faulty_id not in ids:
        raise ValueError(f"faulty subsystem {faulty_id} missing from ids {ids}")

    m = len(ids)
    dim = N_STATES * m
    p_rows = [lin.Csub[i - 1].shape[0] for i in ids]
    p_total = sum(p_rows)
    A = np.zeros((dim, dim))
    B = np.zeros((dim, m))
    C_healthy = np.zeros((p_total, dim))
    index_map = {}
    row0 = 0
    for a, ia in enumerate(ids):
        sl = slice(N_STATES * a, N_STATES * (a + 1))
        index_map[ia] = sl
        A[sl, sl] = lin.A[ia - 1]
        B[sl, a] = lin.Bsub[ia - 1]
        C_healthy[row0 : row0 + p_rows[a], sl] = lin.Csub[ia - 1]
        for b, ib in enumerate(ids):
            if b == a:
                continue
            A[sl, N_STATES * b : N_STATES * (b + 1)] = lin.Gint[ia - 1, ib - 1]
        row0 += p_rows[a]

    C = C_healthy.copy()
    fpos = ids.index(faulty_id)
    frow0 = sum(p_rows[:fpos])
    rows = range(p_rows[fpos]) if faulty_rows is None else faulty_rows
    for r in rows:
        if not 0 <= r < p_rows[fpos]:
            raise ValueError(
                f"faulty row {r} out of range for subsystem {faulty_id}"
            )
        C[frow0 + r, :] = 0.0
    return AugmentedSystem(ids=ids, A=A, B=B, C=C, C_healthy=C_healthy,
                           index_map=index_map, faulty_id=faulty_id)


def _numeric_observable(aug: AugmentedSystem, tol: float) -> bool:
    """Cascade test when the coupling is one-directional, Kalman otherwise."""
    healthy = [i for i in aug.ids if i != aug.faulty_id]
    if healthy:
        h_idx = np.concatenate([np.arange(aug.index_map[i].start,
                                          aug.index_map[i].stop)
                                for i in healthy])
        f_idx = np.arange(aug.index_map[aug.faulty_id].start,
                          aug.index_map[aug.faulty_id].stop)
        A21 = aug.A[np.ix_(f_idx, h_idx)]
        if not np.any(A21):
            A11 = aug.A[np.ix_(h_idx, h_idx)]
            A12 = aug.A[np.ix_(h_idx, f_idx)]
            A22 = aug.A[np.ix_(f_idx, f_idx)]
            nonzero_rows = np.any(aug.C, axis=1)
            C1 = aug.C[np.ix_(nonzero_rows, h_idx)]
            if C1.size == 0:
                return False
            ok, _ = cascade_observable(A11, A12, A22, C1, tol)
            return ok
    rank, ok = kalman_rank(aug.A, aug.C, tol)
    return ok


def evaluate_candidate(aug: AugmentedSystem, alpha: float, xi: float,
                       tol: float = 1e-9) -> CostReport:
    """Screen one candidate set and, when admissible, price it.

    The structural filter runs first (it is cheap and catches decoupled
    members), then the numeric observability test, then the stability screen
    on the merged state matrix.  The cost combines the observability Gramian
    trace with the output-functionality gap caused by the dead sensor rows.
    """
    cand = aug.ids
    patt = ZeroPattern.from_matrices(aug.A, aug.C)
    if not structurally_observable(patt):
        return CostReport(candidate=cand, observable=False,
                          stable=is_hurwitz(aug.A),
                          reason="structurally unobservable")
    observable = _numeric_observable(aug, tol)
    stable = is_hurwitz(aug.A)
    if not observable:
        return CostReport(candidate=cand, observable=False, stable=stable,
                          reason="numerically unobservable")
    if not stable:
        return CostReport(candidate=cand, observable=True, stable=False,
                          reason="merged state matrix is not Hurwitz")
    Wo = obs_gramian(aug.A, aug.C)
    trace_Wo = float(np.trace(Wo))
    hf_sq = hf_norm_sq(aug.A, aug.B, aug.C_healthy, aug.C)
    hf = float(np.sqrt(max(hf_sq, 0.0)))
    J = cost_J(trace_Wo, hf, alpha, xi)
    return CostReport(candidate=cand, observable=True, stable=True,
                      trace_Wo=trace_Wo, rho=1.0 / trace_Wo, hf_norm=hf, J=J)


@dataclass(frozen=True)
class ObserverSpec:
    """Everything the runtime needs to estimate a candidate set's states.

    ``output_weights`` combines the candidate's measured output rows into the
    scalar driving the chain observer; ``chain`` is ``None`` when the merged
    system is observable only through several outputs jointly, in which case
    no single-gain chain observer exists for it.
    """

    ids: tuple
    index_map: dict
    chain: Optional[ChainForm]
    output_weights: Optional[np.ndarray]


def _single_output_chain(aug: AugmentedSystem, tol: float):
    """Chain transform from one measured row (or their sum) if possible."""
    rows = [r for r in range(aug.C.shape[0]) if np.any(aug.C[r])]
    trials = [(r, aug.C[r]) for r in rows]
    if len(rows) > 1:
        trials.append((None, aug.C[rows].sum(axis=0)))
    for r, c_row in trials:
        _, ok = kalman_rank(aug.A, c_row, tol)
        if not ok:
            continue
        try:
            chain = to_chain_form(StateSpace(A=aug.A, B=aug.B, C=c_row), tol)
        except ValueError:
            continue
        w = np.zeros(aug.C.shape[0])
        if r is None:
            w[rows] = 1.0
        else:
            w[r] = 1.0
        return chain, w
    return None, None


def _spec_for(aug: AugmentedSystem, tol: float) -> ObserverSpec:
    chain, w = _single_output_chain(aug, tol)
    return ObserverSpec(ids=aug.ids, index_map=dict(aug.index_map),
                        chain=chain, output_weights=w)


@dataclass
class ReconfigPlan:
    """Outcome of the reconfiguration search for one fault."""

    mode: str
    faulty_id: int
    P: Optional[np.ndarray] = None
    augment_set: Optional[tuple] = None
    observer_spec: Optional[ObserverSpec] = None
    J: Optional[float] = None
    candidates: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "faulty_id": self.faulty_id,
            "P": None if self.P is None else self.P.tolist(),
            "augment_set": None if self.augment_set is None
            else list(self.augment_set),
            "J": self.J,
            "candidates": [c.to_dict() for c in self.candidates],
        }


def rftc_select(faulty_id: int, lin: LinearizedPlant, alpha: float, xi: float,
                *, faulty_C=None, faulty_rows: Optional[Sequence[int]] = None,
                j_max: Optional[float] = None, tol: float = 1e-9,
                excluded_ids: Sequence[int] = (),
                bank: Optional[dict] = None) -> ReconfigPlan:
    """Pick the cheapest admissible reconfiguration for a faulty subsystem.

    ``faulty_C`` is the subsystem's post-fault output matrix (``None`` means
    every row is dead).  If the pair (own dynamics, post-fault outputs) is
    still observable the plan is a virtual sensor.  Otherwise candidate
    merge sets are enumerated in ascending cardinality (ids sorted, then
    lexicographic), screened, priced, and the lowest-cost admissible set at
    the smallest workable cardinality wins; ties go to the lexicographically
    smallest id tuple.  ``excluded_ids`` removes subsystems that cannot help
    (for example ones currently faulty themselves).

    Without ``j_max`` every admissible candidate is acceptable; a warning is
    logged because an unbounded cost cap accepts arbitrarily poor sets.
    """
    n = lin.n
    if not 1 <= faulty_id <= n:
        raise ValueError(f"unknown subsystem id {faulty_id}; plant has 1..{n}")
    f = faulty_id - 1
    Csub = lin.Csub[f]
    rows = (list(range(Csub.shape[0])) if faulty_rows is None
            else list(faulty_rows))

    if faulty_C is not None:
        faulty_C = np.atleast_2d(np.asarray(faulty_C, dtype=float))
        if np.any(faulty_C):
            _, still_obs = kalman_rank(lin.A[f], faulty_C, tol)
            if still_obs:
                chain = to_chain_form(
                    StateSpace(A=lin.A[f], B=lin.Bsub[f], C=Csub), tol
                )
                spec = ObserverSpec(
                    ids=(faulty_id,),
                    index_map={faulty_id: slice(0, N_STATES)},
                    chain=chain,
                    output_weights=np.ones(1),
                )
                return ReconfigPlan(
                    mode=MODE_VIRTUAL_SENSOR,
                    faulty_id=faulty_id,
                    P=default_P(Csub, rows),
                    observer_spec=spec,
                )

    if j_max is None:
        log.warning(
            "rftc_select called without a cost cap; treating J_max as +inf"
        )
        j_max = np.inf

    helpers = [i for i in range(1, n + 1)
               if i != faulty_id and i not in set(excluded_ids)]
    reports: list[CostReport] = []
    for card in range(1, len(helpers) + 1):
        admissible = []
        for combo in itertools.combinations(sorted(helpers), card):
            ids = (faulty_id,) + combo
            aug = augment(ids, lin, faulty_id, faulty_rows=faulty_rows)
            rep = evaluate_candidate(aug, alpha, xi, tol)
            reports.append(rep)
            if rep.J is not None and rep.J <= j_max:
                admissible.append((rep, aug))
        if admissible:
            best, best_aug = min(
                admissible, key=lambda t: (t[0].J, t[0].candidate)
            )
            key = (faulty_id, tuple(sorted(best.candidate[1:])))
            if bank is not None and key in bank:
                spec = bank[key]
            else:
                spec = _spec_for(best_aug, tol)
                if bank is not None:
                    bank[key] = spec
            return ReconfigPlan(
                mode=MODE_AUGMENTATION,
                faulty_id=faulty_id,
                P=default_P(Csub, rows),
                augment_set=best.candidate,
                observer_spec=spec,
                J=best.J,
                candidates=reports,
            )
    return ReconfigPlan(
        mode=MODE_UNRECOVERABLE,
        faulty_id=faulty_id,
        candidates=reports,
    )


def build_observer_bank(lin: LinearizedPlant, cap: int = 3,
                        tol: float = 1e-9) -> dict:
    """Precompute observer specs for every observable candidate set.

    Keys are ``(faulty_id, helper_ids_sorted)``; singletons ``(i, ())`` carry
    each subsystem's own healthy-sensor observer.  Merge entries exist exactly
    for the candidate sets (up to ``cap`` members) whose merged pair passes
    the Kalman test with the faulty member's outputs zeroed.
    """
    if cap < 1:
        raise ValueError(f"cardinality cap must be at least 1, got {cap}")
    n = lin.n
    bank: dict = {}
    for i in range(1, n + 1):
        sub = StateSpace(A=lin.A[i - 1], B=lin.Bsub[i - 1], C=lin.Csub[i - 1])
        rank, ok = kalman_rank(sub.A, sub.C, tol)
        if not ok:
            continue
        chain = to_chain_form(sub, tol)
        bank[(i, ())] = ObserverSpec(
            ids=(i,), index_map={i: slice(0, N_STATES)},
            chain=chain, output_weights=np.ones(sub.C.shape[0]),
        )
    for f in range(1, n + 1):
        helpers = [i for i in range(1, n + 1) if i != f]
        for card in range(1, cap):
            for combo in itertools.combinations(helpers, card):
                aug = augment((f,) + combo, lin, f)
                _, ok = kalman_rank(aug.A, aug.C, tol)
                if not ok:
                    continue
                bank[(f, combo)] = _spec_for(aug, tol)
    return bank
