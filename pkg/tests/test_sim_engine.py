"""Scenario plumbing, the shared-grid runner, recovery verdicts, writers."""

import json

import numpy as np
import pytest

from gridftc.power_model import NetworkModel, PlantModel, construct_equilibrium
from gridftc.reconfig import FaultEvent, ReconfigPlan
from gridftc.sim_engine import (
    ControllerConfig,
    ObserverConfig,
    Scenario,
    ScenarioError,
    TrajectoryLog,
    _grid_index,
    build_report,
    measure,
    nominal_controller,
    pole_placement_gains,
    recovery_summary,
    run_scenario,
    write_events_json,
    write_report_json,
    write_trajectory_csv,
)
from test_power_model import make_params


def island_plant(n=2):
    """Machines with no ties at all: nothing can help a blinded one."""
    g = [0.30, 0.26, 0.28][:n]
    b = [-1.6, -1.4, -1.5][:n]
    params = make_params(n)
    params, op = construct_equilibrium([0.2, 0.3, 0.25][:n],
                                       [1.05, 1.02, 1.04][:n],
                                       params, NetworkModel(G=np.diag(g),
                                                            B=np.diag(b)))
    return PlantModel(generators=tuple(params),
                      network=NetworkModel(G=np.diag(g), B=np.diag(b)),
                      op=op, name="island")


@pytest.fixture(scope="module")
def two_fault_log(desk5):
    """A compressed double-fault run reused by the marker/writer tests."""
    scn = Scenario(
        plant=desk5, horizon=40.0, dt=1e-3,
        faults=(
            FaultEvent(t_fault=15.0, subsystem=5, kind="gain",
                       factor=0.4, fdi_delay=3.0),
            FaultEvent(t_fault=25.0, subsystem=5, kind="total-loss",
                       fdi_delay=1.0),
        ),
        controller=ControllerConfig(gains=[[-0.003, -0.03, 0.0]] * 5),
        j_max=20.0, settling_window=10.0, name="compressed-double")
    scn.validate()
    return scn, run_scenario(scn, seed=0)


# ------------------------------------------------------------- validation


def test_validate_names_offending_field(desk2):
    with pytest.raises(ScenarioError) as err:
        Scenario(plant=desk2, horizon=10.0, dt=0.0).validate()
    assert err.value.field == "dt"
    with pytest.raises(ScenarioError) as err:
        Scenario(plant=desk2, horizon=-1.0, dt=1e-3).validate()
    assert err.value.field == "horizon"
    with pytest.raises(ScenarioError) as err:
        Scenario(plant=desk2, horizon=10.0, dt=1e-3,
                 settling_window=-1.0).validate()
    assert err.value.field == "settling_window"


def test_validate_fault_timeline(desk2):
    late = FaultEvent(t_fault=5.0, subsystem=1, kind="total-loss",
                      fdi_delay=1.0)
    early = FaultEvent(t_fault=2.0, subsystem=2, kind="total-loss",
                       fdi_delay=1.0)
    with pytest.raises(ScenarioError) as err:
        Scenario(plant=desk2, horizon=30.0, dt=1e-3,
                 faults=(late, early)).validate()
    assert err.value.field == "faults"
    with pytest.raises(ScenarioError) as err:
        Scenario(plant=desk2, horizon=10.0, dt=1e-3, faults=(late,),
                 settling_window=10.0).validate()
    assert err.value.field == "horizon"
    with pytest.raises(ScenarioError) as err:
        Scenario(plant=desk2, horizon=30.0, dt=1e-3,
                 faults=(FaultEvent(t_fault=1.0, subsystem=7,
                                    kind="total-loss", fdi_delay=0.0),)
                 ).validate()
    assert err.value.field == "faults[0].subsystem"


def test_controller_config_checks(desk2):
    with pytest.raises(ScenarioError) as err:
        ControllerConfig(poles=(-1.0, -2.0, -3.0), gains=np.zeros((2, 3)))
    assert err.value.field == "controller"
    for poles in [(-1.0, -2.0), (-1.0, -1.0, -2.0), (-1.0, 2.0, -3.0)]:
        with pytest.raises(ScenarioError) as err:
            ControllerConfig(poles=poles)
        assert err.value.field == "controller.poles"
    with pytest.raises(ScenarioError) as err:
        ControllerConfig(gains=np.zeros((2, 4)))
    assert err.value.field == "controller.gains"
    with pytest.raises(ScenarioError) as err:
        Scenario(plant=desk2, horizon=5.0, dt=1e-3,
                 controller=ControllerConfig(gains=np.zeros((3, 3)))
                 ).validate()
    assert err.value.field == "controller.gains"


def test_observer_config_checks():
    with pytest.raises(ScenarioError) as err:
        ObserverConfig(l_mode="adaptive")
    assert err.value.field == "observer.l_mode"
    with pytest.raises(ScenarioError) as err:
        ObserverConfig(l_mode="constant")
    assert err.value.field == "observer.l_value"
    with pytest.raises(ScenarioError) as err:
        ObserverConfig(L_max=0.5)
    assert err.value.field == "observer.L_max"
    with pytest.raises(ScenarioError) as err:
        ObserverConfig(shaping="chebyshev")
    assert err.value.field == "observer.shaping"


def test_from_dict_rejects_unknown_fields(desk5):
    base = {"plant": desk5.to_dict(), "horizon": 5.0, "dt": 1e-3}
    with pytest.raises(ScenarioError) as err:
        Scenario.from_dict({**base, "frobnicate": 1})
    assert err.value.field == "frobnicate"
    with pytest.raises(ScenarioError) as err:
        Scenario.from_dict({"plant": desk5.to_dict(), "horizon": 5.0})
    assert err.value.field == "dt"
    with pytest.raises(ScenarioError) as err:
        Scenario.from_dict({**base, "observer": {"speed": 2}})
    assert err.value.field == "observer.speed"
    with pytest.raises(ScenarioError) as err:
        Scenario.from_dict({**base, "weights": {"beta": 1.0}})
    assert err.value.field == "weights.beta"


def test_dict_round_trip(desk5):
    d = {
        "name": "loop", "plant": desk5.to_dict(), "horizon": 12.0,
        "dt": 0.002,
        "faults": [{"t_fault": 1.0, "subsystem": 5, "kind": "gain",
                    "factor": 0.4, "fdi_delay": 0.5}],
        "observer": {"l_mode": "constant", "l_value": 2.0},
        "controller": {"gains": [[-0.003, -0.03, 0.0]] * 5},
        "weights": {"alpha": 10.0, "xi": 5.0},
        "j_max": 20.0, "settling_window": 4.0,
    }
    scn = Scenario.from_dict(d)
    again = Scenario.from_dict(scn.to_dict())
    assert again.to_dict() == scn.to_dict()


# ------------------------------------------------------------ output map


def test_measure_plain_and_faulted(rng):
    x = rng.standard_normal((3, 3))
    assert np.array_equal(measure(x), x[:, 0])

    gain = FaultEvent(t_fault=0.0, subsystem=2, kind="gain", factor=0.5,
                      fdi_delay=0.0)
    y = measure(x, [gain])
    assert y[1] == 0.5 * x[1, 0] and y[0] == x[0, 0]

    stuck = FaultEvent(t_fault=0.0, subsystem=1, kind="stuck", fdi_delay=0.0)
    y = measure(x, [stuck], held={stuck: 0.77})
    assert y[0] == 0.77
    with pytest.raises(ValueError, match="held"):
        measure(x, [stuck])

    dead = FaultEvent(t_fault=0.0, subsystem=3, kind="total-loss",
                      fdi_delay=0.0)
    assert np.isnan(measure(x, [dead])[2])

    with pytest.raises(ValueError, match="shape"):
        measure(np.zeros((3, 2)))


def test_grid_index_rounding():
    assert _grid_index(150.0, 0.025) == 6000
    assert _grid_index(0.1 + 0.1 + 0.1, 0.1) == 3   # representation noise
    assert _grid_index(0.31, 0.1) == 4              # genuine offset: next node


# ------------------------------------------------------------- controller


def test_pole_placement_hits_targets(desk2):
    lin = desk2.linearize()
    poles = (-1.0, -2.5, -4.0)
    K = pole_placement_gains(lin, poles)
    for i in range(lin.n):
        closed = lin.A[i] - np.outer(lin.Bsub[i], K[i])
        got = np.sort(np.linalg.eigvals(closed).real)
        assert np.allclose(got, np.sort(poles), atol=1e-8)


def test_nominal_controller_is_feedforward_at_zero():
    u0 = np.array([1.2, 0.9])
    assert np.array_equal(nominal_controller(np.zeros((2, 3)),
                                             np.ones((2, 3)), u0), u0)
    u = nominal_controller([[1.0, 0.0, 2.0]], [[0.5, 1.0, 0.25]], [3.0])
    assert u == pytest.approx([3.0 - 1.0])


# ------------------------------------------------------------------- runs


def test_healthy_run_holds_equilibrium(desk2):
    scn = Scenario(plant=desk2, horizon=2.0, dt=1e-3,
                   controller=ControllerConfig(gains=np.zeros((2, 3))))
    log = run_scenario(scn, seed=0)
    assert log.t.shape == (2001,)
    assert np.max(np.abs(log.x)) <= 1e-8
    assert np.max(np.abs(log.xhat)) <= 1e-6
    assert np.all(log.L == 1.0)
    assert log.events == [] and not log.unrecoverable


def test_initial_offset_enters_and_decays(desk2):
    scn = Scenario(plant=desk2, horizon=6.0, dt=1e-3,
                   observer=ObserverConfig(initial_offset=0.2),
                   controller=ControllerConfig(gains=np.zeros((2, 3))))
    log = run_scenario(scn, seed=0)
    assert np.allclose(log.xhat[0], 0.2, atol=1e-12)
    err = np.max(np.abs(log.xhat - log.x), axis=(1, 2))
    assert err[-1] < 0.5 * err[0]
    assert np.all(np.diff(log.L, axis=0) >= 0.0)


def test_two_fault_markers(two_fault_log):
    scn, log = two_fault_log
    assert not log.unrecoverable
    assert [m.label for m in log.events] == [
        "fault:sub5:gain",
        "fdi:sub5:virtual-sensor",
        "fault:sub5:total-loss",
        "fdi:sub5:augmentation",
    ]
    assert [m.step for m in log.events] == [15000, 18000, 25000, 26000]
    assert [m.kind for m in log.events] == ["fault", "fdi", "fault", "fdi"]
    assert all(m.subsystem == 5 for m in log.events)
    for m in log.events:
        assert m.t == pytest.approx(m.step * scn.dt, abs=1e-9)
    assert [p.mode for _, p in log.plans] == ["virtual-sensor",
                                              "augmentation"]
    assert log.plans[1][1].augment_set == (5, 2)


def test_two_fault_recovery_rows(two_fault_log):
    scn, log = two_fault_log
    rows = recovery_summary(scn, log)
    assert [r["subsystem"] for r in rows] == [5, 5]
    assert [r["kind"] for r in rows] == ["gain", "total-loss"]
    assert [r["plan_mode"] for r in rows] == ["virtual-sensor",
                                              "augmentation"]
    for r in rows:
        assert r["verdict"] in ("recovered", "not-recovered")
        assert r["peak"] > 0.0 and r["tail_max"] >= 0.0


def synthetic_log(profile, plans=()):
    t = np.linspace(0.0, 20.0, 2001)
    x = np.zeros((t.size, 1, 3))
    x[:, 0, 0] = profile(t)
    zeros = np.zeros((t.size, 1))
    return TrajectoryLog(scenario_name="synthetic", t=t, x=x,
                         xhat=np.zeros_like(x), y_meas=zeros, y_used=zeros,
                         L=np.ones((t.size, 1)), plans=list(plans))


def test_recovery_summary_verdicts(desk2):
    fault = FaultEvent(t_fault=5.0, subsystem=1, kind="total-loss",
                       fdi_delay=1.0)
    scn = Scenario(plant=desk2, horizon=20.0, dt=0.01, faults=(fault,),
                   settling_window=5.0)

    decay = synthetic_log(lambda t: np.where(t >= 5.0,
                                             np.exp(-(t - 5.0)), 0.0))
    assert recovery_summary(scn, decay)[0]["verdict"] == "recovered"

    flat = synthetic_log(lambda t: np.where(t >= 5.0, 1.0, 0.0))
    assert recovery_summary(scn, flat)[0]["verdict"] == "not-recovered"

    doomed = synthetic_log(
        lambda t: np.where(t >= 5.0, np.exp(-(t - 5.0)), 0.0),
        plans=[(6.0, ReconfigPlan(mode="unrecoverable", faulty_id=1))])
    assert recovery_summary(scn, doomed)[0]["verdict"] == "unrecoverable"


def test_isolated_machine_is_unrecoverable():
    plant = island_plant()
    scn = Scenario(
        plant=plant, horizon=15.0, dt=1e-3,
        faults=(FaultEvent(t_fault=3.0, subsystem=1, kind="total-loss",
                           fdi_delay=1.0),),
        controller=ControllerConfig(gains=np.zeros((2, 3))),
        j_max=20.0)
    log = run_scenario(scn, seed=0)
    assert log.unrecoverable
    assert log.t.shape == (15001,)    # the run still completes
    assert [m.label for m in log.events] == ["fault:sub1:total-loss",
                                             "fdi:sub1:unrecoverable"]
    assert recovery_summary(scn, log)[0]["verdict"] == "unrecoverable"


def test_noise_is_seeded(desk2, tmp_path):
    scn = Scenario(plant=desk2, horizon=1.0, dt=1e-3, noise_amplitude=1e-3,
                   controller=ControllerConfig(gains=np.zeros((2, 3))))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_trajectory_csv(run_scenario(scn, seed=7), a)
    write_trajectory_csv(run_scenario(scn, seed=7), b)
    assert a.read_bytes() == b.read_bytes()
    other = run_scenario(scn, seed=8)
    assert np.max(np.abs(other.y_meas - run_scenario(scn, seed=7).y_meas)) > 0


# ---------------------------------------------------------------- writers


def test_trajectory_csv_layout(two_fault_log, tmp_path):
    scn, log = two_fault_log
    path = tmp_path / "traj.csv"
    write_trajectory_csv(log, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 40002    # header + horizon/dt + 1 rows

    header = ["t"]
    for i in range(1, 6):
        header += [f"sub{i}_x{j}" for j in (1, 2, 3)]
        header += [f"sub{i}_xhat{j}" for j in (1, 2, 3)]
        header += [f"sub{i}_y", f"sub{i}_L"]
    header.append("event")
    assert lines[0] == ",".join(header)

    assert lines[1 + 18000].endswith("fdi:sub5:virtual-sensor")
    data = np.loadtxt(path, delimiter=",", skiprows=1,
                      usecols=range(41), max_rows=100)
    assert np.allclose(data[:, 0], log.t[:100])
    assert np.allclose(data[:, 1], log.x[:100, 0, 0])


def test_event_and_report_json(two_fault_log, tmp_path):
    scn, log = two_fault_log
    epath = tmp_path / "events.json"
    write_events_json(log, epath)
    payload = json.loads(epath.read_text())
    assert payload["scenario"] == "compressed-double"
    assert [e["label"] for e in payload["events"]] == \
        [m.label for m in log.events]
    assert [p["plan"]["mode"] for p in payload["plans"]] == \
        ["virtual-sensor", "augmentation"]

    report = build_report(scn, log, wall_time_s=1.25,
                          outputs={"trajectory": "traj.csv"})
    rpath = tmp_path / "report.json"
    write_report_json(report, rpath)
    loaded = json.loads(rpath.read_text())
    assert loaded["scenario"] == "compressed-double"
    assert loaded["wall_time_s"] == 1.25
    assert len(loaded["recovery"]) == 2
    assert loaded["outputs"] == {"trajectory": "traj.csv"}
    assert loaded["unrecoverable"] is False
    # one disturbance bound per chain coordinate; the measured row sees none
    assert len(loaded["interaction_bounds"]) == 3
    assert loaded["interaction_bounds"][0] == 0.0
