import itertools

import numpy as np
import pytest

from safenav.dynamics import BoatParams, boat_step, rest_state
from safenav.nmpc import (NMPCConfig, NMPCController, PassThrough, SolverError, nmpc_solve, plan_cost,
                          plan_cost_reference, reference_at, rollout_outputs,
                          rollout_outputs_reference, steady_thrust, track_episode)

P = BoatParams()


def cruising_state(v1=1.0):
    x = rest_state(P)
    x[0] = v1
    return x


def test_config_validation_and_round_trip():
    for bad in ({"H": 0}, {"dt": 0.0}, {"Q": (-1, 0)}, {"u_min": 1.0, "u_max": 0.0}):
        with pytest.raises(ValueError):
            NMPCConfig(**bad)
    with pytest.raises(ValueError):
        NMPCConfig.from_dict({"horizon": 5})
    cfg = NMPCConfig(H=7, Q=(3, 4))
    assert NMPCConfig.from_dict(cfg.to_dict()) == cfg


def test_steady_thrust_balances_drag():
    x = cruising_state(1.3)
    u = steady_thrust(1.3, P)
    y = boat_step(x, (u, u), P, 0.05)
    assert y[0] == pytest.approx(1.3, abs=1e-12)


def test_fixpoint_at_tracked_equilibrium():
    cfg = NMPCConfig(R=(0.0, 0.0))
    x = cruising_state(1.0)
    u_eq = steady_thrust(1.0, P)
    sol = nmpc_solve(x, (1.0, 0.0), cfg, P, warm_plan=np.full((cfg.H, 2), u_eq))
    assert sol.cost_history[0] - sol.cost <= cfg.tol
    assert sol.iterations <= 1
    assert np.linalg.norm(sol.u_star - u_eq) <= 1e-3 * np.linalg.norm([u_eq, u_eq])


def test_unreachable_speed_saturates():
    cfg = NMPCConfig(u_max=4.0)
    sol = nmpc_solve(cruising_state(0.5), (50.0, 0.0), cfg, P)
    np.testing.assert_array_equal(sol.plan, np.full((cfg.H, 2), 4.0))


def test_h2_matches_exhaustive_grid():
    cfg = NMPCConfig(H=2, u_min=-6.0, u_max=6.0, max_iters=200, tol=1e-10)
    x = cruising_state(0.6)
    x[5] = 0.1
    r = (1.2, 0.4)
    levels = np.linspace(cfg.u_min, cfg.u_max, 21)
    U = np.array(list(itertools.product(levels, repeat=4))).reshape(-1, 2, 2)
    best = plan_cost_reference(x, U, r, cfg, P).min()
    sol = nmpc_solve(x, r, cfg, P)
    assert sol.cost <= 1.02 * best


def test_monotone_descent_and_bounds(rng):
    cfg = NMPCConfig(u_min=-5.0, u_max=7.0)
    for _ in range(20):
        x = cruising_state(rng.uniform(0, 1.5))
        x[5] = rng.uniform(-0.5, 0.5)
        x[11] = rng.uniform(-3, 3)
        sol = nmpc_solve(x, rng.uniform([-0.5, -1], [2, 1]), cfg, P)
        assert all(b <= a for a, b in zip(sol.cost_history, sol.cost_history[1:]))
        assert np.all(sol.plan >= cfg.u_min) and np.all(sol.plan <= cfg.u_max)
        assert sol.cost >= 0


def test_warm_start_determinism(rng):
    cfg = NMPCConfig()
    x = cruising_state(0.7)
    warm = rng.uniform(-2, 2, (cfg.H, 2))
    a = nmpc_solve(x, (1.0, 0.2), cfg, P, warm)
    b = nmpc_solve(x.copy(), (1.0, 0.2), cfg, P, warm.copy())
    assert a.plan.tobytes() == b.plan.tobytes() and a.cost == b.cost


def test_controller_shifts_plan():
    ctrl = NMPCController(NMPCConfig(), P)
    x = cruising_state(0.5)
    ctrl(x, (1.0, 0.0))
    first = ctrl.plan.copy()
    ctrl(x, (1.0, 0.0))
    shifted = np.vstack([first[1:], first[-1:]])
    assert ctrl.last.cost_history[0] == plan_cost(x, shifted[None], (1.0, 0.0), NMPCConfig(), P)[0]
    ctrl.reset()
    assert ctrl.plan is None


def test_solver_error_at_pitch_guard():
    x = rest_state(P)
    x[10] = P.theta_max
    with pytest.raises(SolverError) as info:
        nmpc_solve(x, (1.0, 0.0), NMPCConfig(), P)
    assert info.value.stage == 0


def test_rollout_failure_reports_stage():
    cfg = NMPCConfig(H=6, dt=0.05)
    x = rest_state(P)
    x[10], x[4] = 1.0, 0.5  # steep pitch: the stiff restoring moment swings it past the guard
    stages = []
    for fn in (rollout_outputs, rollout_outputs_reference):
        with pytest.raises(SolverError) as info:
            fn(x, np.zeros((1, cfg.H, 2)), cfg, P)
        stages.append(info.value.stage)
    assert stages == [1, 1]


def test_pass_through():
    np.testing.assert_array_equal(PassThrough()(np.zeros(3), (0.3, -0.1)), [0.3, -0.1])


def test_reference_schedule_lookup():
    sched = [(0, 0.8, 0), (8, 1.4, 0.4)]
    np.testing.assert_array_equal(reference_at(sched, 7.99), [0.8, 0])
    np.testing.assert_array_equal(reference_at(sched, 8.0), [1.4, 0.4])


def test_zero_reference_from_rest_stays_at_rest():
    log = track_episode(rest_state(P), [(0.0, 0.0, 0.0)], NMPCConfig(), P, duration=2.0)
    assert log.error is None and log.monotone
    assert np.max(np.abs(log.u)) <= 1e-6
    assert np.max(np.abs(log.v1)) <= 1e-9


def test_speed_step_settles():
    log = track_episode(rest_state(P), [(0.0, 1.0, 0.0)], NMPCConfig(), P, duration=8.0)
    tail = log.v1[log.t >= 6.0]
    assert np.max(np.abs(tail - 1.0)) <= 0.05


def test_mirrored_turn_reference_mirrors_thrust():
    cfg = NMPCConfig()
    a = track_episode(rest_state(P), [(0.0, 0.8, 0.3)], cfg, P, duration=2.0)
    b = track_episode(rest_state(P), [(0.0, 0.8, -0.3)], cfg, P, duration=2.0)
    np.testing.assert_allclose(b.u, a.u[:, ::-1], atol=1e-6)
    np.testing.assert_allclose(b.w3, -a.w3, atol=1e-6)
