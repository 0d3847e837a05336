"""Acceptance suite: nine go/no-go criteria, one test (and verdict line) each.

Run ``pytest tests/test_acceptance.py -v`` for the per-criterion verdicts.
The end-to-end double-fault study dominates the runtime (two 340 s
simulations, about a minute together); everything else is seconds.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

import _oracles as orc
from gridftc.desk_models import data_path
from gridftc.observability import cascade_observable, cost_J, obs_gramian
from gridftc.power_model import construct_equilibrium, derivatives, linearize
from gridftc.reconfig import FaultEvent, default_P, rftc_select, virtual_sensor
from gridftc.sim_engine import (
    ControllerConfig,
    ObserverConfig,
    Scenario,
    load_scenario,
    recovery_summary,
    run_scenario,
    write_trajectory_csv,
)


def test_ac1_candidate_costs_and_choice(desk5_lin):
    """Frozen candidate prices and the resulting helper choice."""
    assert cost_J(3.1151, 0.1802, 100.0, 50.0) == pytest.approx(11.9290,
                                                                abs=1e-3)
    assert cost_J(6.4649, 0.2182, 100.0, 50.0) == pytest.approx(4.7732,
                                                                abs=1e-3)

    plan = rftc_select(5, desk5_lin, 100.0, 50.0, j_max=20.0)
    assert plan.mode == "augmentation"
    assert plan.augment_set == (5, 2)
    assert plan.J == pytest.approx(4.7732, abs=1e-3)
    by_set = {tuple(r.candidate): r for r in plan.candidates}
    assert by_set[(5, 1)].trace_Wo == pytest.approx(3.1151, abs=1e-3)
    assert by_set[(5, 1)].hf_norm == pytest.approx(0.1802, abs=1e-3)
    assert by_set[(5, 1)].J == pytest.approx(11.9290, abs=1e-3)
    assert by_set[(5, 2)].trace_Wo == pytest.approx(6.4649, abs=1e-3)
    assert by_set[(5, 2)].hf_norm == pytest.approx(0.2182, abs=1e-3)
    print("AC1 candidate costs and choice: PASS")


def test_ac2_gramian_solver_residuals_and_quadrature():
    """Lyapunov residuals on 200 random stable systems; traces by quadrature."""
    rng = np.random.default_rng(20260814)
    for _ in range(200):
        n = int(rng.integers(2, 11))
        A = orc.random_hurwitz(rng, n)
        C = rng.standard_normal((int(rng.integers(1, 4)), n))
        W = obs_gramian(A, C)
        Q = C.T @ C
        residual = np.linalg.norm(A.T @ W + W @ A + Q)
        assert residual <= 1e-10 * np.linalg.norm(Q)

    for _ in range(12):
        n = int(rng.integers(2, 7))
        A = orc.random_hurwitz(rng, n)
        C = rng.standard_normal((1, n))
        trace = float(np.trace(obs_gramian(A, C)))
        ref = orc.gramian_trace_quad(A, C)
        assert trace == pytest.approx(ref, rel=1e-6)
    print("AC2 Gramian residuals and quadrature traces: PASS")


def test_ac3_cascade_test_agrees_with_rank_oracle():
    """Interaction-based observability vs plain SVD rank, 1000 + 100 draws."""
    rng = np.random.default_rng(31415)
    for _ in range(1000):
        n1 = int(rng.integers(1, 4))
        n2 = int(rng.integers(1, 4))
        A11, A12, A22, C1 = orc.random_separated_cascade(rng, n1, n2)
        got, _ = cascade_observable(A11, A12, A22, C1)
        A_full = np.block([[A11, A12], [np.zeros((n2, n1)), A22]])
        C_full = np.hstack([C1, np.zeros((C1.shape[0], n2))])
        assert got == orc.svd_observable(A_full, C_full)

    for _ in range(100):
        # no interaction: the unmeasured block is invisible to both tests
        n1 = int(rng.integers(1, 4))
        n2 = int(rng.integers(1, 4))
        A11, _, A22, C1 = orc.random_separated_cascade(rng, n1, n2)
        A12 = np.zeros((n1, n2))
        got, _ = cascade_observable(A11, A12, A22, C1)
        A_full = np.block([[A11, A12], [np.zeros((n2, n1)), A22]])
        C_full = np.hstack([C1, np.zeros((C1.shape[0], n2))])
        assert got is False
        assert orc.svd_observable(A_full, C_full) is False
    print("AC3 cascade observability vs rank oracle: PASS")


def test_ac4_linearization_accuracy_at_random_operating_points(desk5):
    """Analytic Jacobian vs central differences at 100 operating points."""
    rng = np.random.default_rng(90125)
    base_d = desk5.op.delta0
    base_E = desk5.op.Eq_prime0
    for _ in range(100):
        d0 = base_d + rng.uniform(-0.25, 0.25, desk5.n)
        E0 = base_E * (1.0 + rng.uniform(-0.08, 0.08, desk5.n))
        params, op = construct_equilibrium(d0, E0, desk5.generators,
                                           desk5.network)
        lin = linearize(op, params, desk5.network)
        full = lin.full_matrix()

        def f(xflat):
            return derivatives(xflat.reshape(desk5.n, 3), op.Ef0, params,
                               op, desk5.network).ravel()

        J_fd = orc.fd_jacobian(f, np.zeros(3 * desk5.n))
        rel = np.abs(full - J_fd) / np.maximum(np.abs(J_fd), 1.0)
        assert np.max(rel) <= 1e-5
    print("AC4 linearization vs finite differences: PASS")


def test_ac5_observer_convergence_from_random_offsets(desk5):
    """Twenty randomly offset estimates converge within a 20 s horizon."""
    rng = np.random.default_rng(424242)
    t0 = time.perf_counter()
    for _ in range(20):
        offset = float(rng.uniform(-1.0, 1.0))
        scn = Scenario(plant=desk5, horizon=20.0, dt=2e-3,
                       observer=ObserverConfig(initial_offset=offset),
                       controller=ControllerConfig(
                           gains=np.zeros((desk5.n, 3))),
                       name="offset-convergence")
        log = run_scenario(scn, seed=0)
        final_err = np.max(np.abs(log.xhat[-1] - log.x[-1]))
        assert final_err < 1e-2
        assert np.all(np.diff(log.L, axis=0) >= 0.0)
    assert time.perf_counter() - t0 < 60.0
    print("AC5 observer convergence under random offsets: PASS")


def test_ac6_virtual_sensor_exactness():
    """Reconstructed outputs equal healthy outputs when the estimate is exact."""
    rng = np.random.default_rng(777)
    worst = 0.0
    for _ in range(1000):
        m = int(rng.integers(2, 7))
        p = int(rng.integers(1, 5))
        C = rng.standard_normal((p, m))
        r = int(rng.integers(0, p))
        C_f = C.copy()
        if rng.random() < 0.5:
            C_f[r] *= float(rng.uniform(0.2, 5.0))   # gain fault
        else:
            C_f[r] = 0.0                             # total loss
        x = rng.standard_normal(m)
        y = virtual_sensor(C_f @ x, x, C, C_f, default_P(C, [r]))
        worst = max(worst, float(np.max(np.abs(y - C @ x))))
    assert worst <= 1e-12
    print("AC6 virtual-sensor exactness: PASS")


def test_ac7_end_to_end_double_fault_study():
    """The shipped two-fault study recovers; the passive replay does not."""
    t0 = time.perf_counter()
    scn = load_scenario(data_path("desk5_scenario.json"))
    log = run_scenario(scn, seed=0)
    assert not log.unrecoverable
    assert [m.label for m in log.events] == [
        "fault:sub5:gain",
        "fdi:sub5:virtual-sensor",
        "fault:sub5:total-loss",
        "fdi:sub5:augmentation",
    ]
    assert [m.t for m in log.events] == pytest.approx([150.0, 153.0,
                                                       250.0, 251.0])
    verdicts = [r["verdict"] for r in recovery_summary(scn, log)]
    assert verdicts == ["recovered", "recovered"]

    passive = replace(scn, reconfigure=False, name="passive-replay")
    log_p = run_scenario(passive, seed=0)
    assert log_p.events == [m for m in log_p.events if m.kind == "fault"]
    verdicts_p = [r["verdict"] for r in recovery_summary(passive, log_p)]
    assert verdicts_p[1] == "not-recovered"
    assert time.perf_counter() - t0 < 120.0
    print("AC7 end-to-end double fault study: PASS")


def test_ac8_selection_matches_brute_force(desk4_lin):
    """Greedy-by-cardinality selection equals exhaustive search on 4 machines."""
    for faulty in range(1, 5):
        plan = rftc_select(faulty, desk4_lin, 100.0, 50.0, j_max=np.inf)
        ref = orc.brute_force_plan(desk4_lin, faulty, 100.0, 50.0)
        if ref is None:
            assert plan.mode == "unrecoverable"
        else:
            assert plan.mode == "augmentation"
            assert plan.augment_set == ref[0]
            assert plan.J == pytest.approx(ref[1], rel=1e-9)
    print("AC8 selection vs brute force: PASS")


def test_ac9_deterministic_trajectory_bytes(desk2, tmp_path):
    """Same scenario and seed, twice: byte-identical trajectory files."""
    scn = Scenario(
        plant=desk2, horizon=3.0, dt=1e-3, noise_amplitude=1e-3,
        faults=(FaultEvent(t_fault=1.0, subsystem=1, kind="gain",
                           factor=0.4, fdi_delay=0.5),),
        controller=ControllerConfig(gains=[[-0.003, -0.03, 0.0]] * 2),
        j_max=20.0, settling_window=1.0, name="determinism")
    first = tmp_path / "first.csv"
    second = tmp_path / "second.csv"
    write_trajectory_csv(run_scenario(scn, seed=11), first)
    write_trajectory_csv(run_scenario(scn, seed=11), second)
    assert first.read_bytes() == second.read_bytes()
    print("AC9 deterministic trajectory bytes: PASS")
