import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_boat_state(rng, theta_lim=1.2):
    x = np.empty(12)
    x[0:3] = rng.uniform(-2, 2, 3)
    x[3:6] = rng.uniform(-1, 1, 3)
    x[6:8] = rng.uniform(-5, 5, 2)
    x[8] = rng.uniform(0.0, 0.2)
    x[9] = rng.uniform(-1.0, 1.0)
    x[10] = rng.uniform(-theta_lim, theta_lim)
    x[11] = rng.uniform(-np.pi, np.pi)
    return x


def boat_richardson_ratio(dt=0.04, T=2.0):
    """error(dt) / error(dt/2) against a dt/4 reference on a smooth turning manoeuvre.

    The run starts from a settled turn so no velocity component changes sign;
    the v|v| drag terms are only C1 at zero, which would spoil the order test.
    """
    from safenav.dynamics import BoatParams, boat_step, rest_state

    p = BoatParams()
    x0 = rest_state(p)
    x0[0] = 1.0
    for _ in range(6000):
        x0 = boat_step(x0, (1.5, 2.5), p, 0.005)

    def run(h):
        x = x0.copy()
        for _ in range(int(round(T / h))):
            x = boat_step(x, (3.0, 4.0), p, h)
        return x

    ref = run(dt / 4)
    return float(np.linalg.norm(run(dt) - ref) / np.linalg.norm(run(dt / 2) - ref))


def grid_qp_oracle(A, b, half=3.0, step=1e-3, centre=(0.0, 0.0)):
    """Minimum-norm point of {r : A r + b >= 0} over the grid centre + step*Z^2 within half of centre.

    Exhaustive over grid columns: in each column the feasible y values form
    an interval, so the grid point nearest y = 0 inside it is found exactly.
    Returns None when no grid point is feasible.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    cx, cy = (float(c) for c in centre)
    n = int(round(half / step))
    ks = np.arange(-n, n + 1)
    xs = cx + ks * step
    lo = np.full(xs.shape, cy - half)
    hi = np.full(xs.shape, cy + half)
    for (ax, ay), bi in zip(A, b):
        rhs = -(ax * xs + bi)  # need ay * y >= rhs
        if ay > 0:
            lo = np.maximum(lo, rhs / ay)
        elif ay < 0:
            hi = np.minimum(hi, rhs / ay)
        else:
            lo = np.where(rhs <= 0, lo, np.inf)
    ilo = np.ceil((lo - cy) / step - 1e-9)
    ihi = np.floor((hi - cy) / step + 1e-9)
    ok = ilo <= ihi
    if not ok.any():
        return None
    iy = np.clip(np.round(-cy / step), ilo, ihi)
    ys = cy + iy * step
    norms = np.where(ok, xs * xs + ys * ys, np.inf)
    k = int(np.argmin(norms))
    return np.array([xs[k], ys[k]])


def refined_grid_qp_oracle(A, b):
    """Global 1e-3 grid search, then a 1e-5 grid in a 0.05 window around its optimum."""
    g = grid_qp_oracle(A, b)
    fine = grid_qp_oracle(A, b, half=0.05, step=1e-5, centre=g)
    return g, fine


def rot_zyx(phi, theta, psi):
    """Body-to-Earth rotation built from elementary rotations."""
    cx, sx = np.cos(phi), np.sin(phi)
    cy, sy = np.cos(theta), np.sin(theta)
    cz, sz = np.cos(psi), np.sin(psi)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def random_qp_instance(rng, n_cons=1):
    """Random halfplanes that all contain a point of [-2, 2]^2, so the optimum stays on the grid."""
    A = rng.normal(size=(n_cons, 2))
    A *= rng.uniform(0.3, 3.0, size=(n_cons, 1)) / np.linalg.norm(A, axis=1, keepdims=True)
    p = rng.uniform(-2.0, 2.0, 2)
    b = -A @ p + rng.uniform(0.0, 1.0, n_cons)
    return A, b
