"""Forward evolution of the interacting-density equation in coefficient space.

The semi-discrete system is M da/dt = -beta^-1 A a - C a - b(a) - d(a, u),
integrated with classical fixed-step RK4.  Control values are held
piecewise constant between grid points (the value at the left node acts
over the whole step).  No positivity projection is applied during
evolution; diagnostics record the minimum density without altering the
state, so the adjoint of the control module stays consistent with the
forward map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import GalerkinOperators, evaluate_density, uniform_mesh


class BlowUpError(RuntimeError):
    def __init__(self, t, norm):
        super().__init__(f"solution norm {norm:.3e} exceeded cap at t={t:.6g}")
        self.t = t
        self.norm = norm


@dataclass
class ControlSignal:
    """Piecewise-constant control: values[i] acts on [times[i], times[i+1])."""

    times: np.ndarray
    values: np.ndarray    # (n_times, L, dim)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.diff(self.times) > 0):
            raise ValueError("control time grid must be strictly increasing")
        if self.values.shape[0] != self.times.shape[0]:
            raise ValueError("one control value per grid point required")

    @classmethod
    def zero(cls, times, n_modes, dim):
        times = np.asarray(times, dtype=float)
        return cls(times, np.zeros((times.shape[0], n_modes, dim)))

    def value_at(self, t):
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        idx = min(max(idx, 0), self.values.shape[0] - 1)
        return self.values[idx]

    def norms(self):
        return np.linalg.norm(self.values.reshape(self.values.shape[0], -1), axis=1)


@dataclass
class Trajectory:
    times: np.ndarray
    coefficients: np.ndarray    # (n_times, L)
    meta: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.coefficients[-1]

    def mass(self, ops: GalerkinOperators):
        return self.coefficients @ ops.zeta

    def max_mass_drift(self, ops: GalerkinOperators):
        return float(np.abs(self.mass(ops) - 1.0).max())

    def distance_to(self, target):
        return np.linalg.norm(self.coefficients - np.asarray(target), axis=1)

    def min_density(self, basis, points_per_axis=256, stride=1):
        mesh = uniform_mesh(basis.domain, points_per_axis)
        out = [float(evaluate_density(a, basis, mesh).min())
               for a in self.coefficients[::stride]]
        return np.array(out)


def drift(a, u, ops: GalerkinOperators):
    """Right-hand side M^-1(-beta^-1 A a - C a - b(a) - d(a, u))."""
    rhs = -(ops.beta_inv * (ops.A @ a)) - ops.C @ a - ops.bilinear(a)
    if u is not None:
        rhs = rhs - ops.control_term(a, u)
    return ops.mass_solve(rhs)


def _rk4_step(a, u, dt, ops):
    k1 = drift(a, u, ops)
    k2 = drift(a + 0.5 * dt * k1, u, ops)
    k3 = drift(a + 0.5 * dt * k2, u, ops)
    k4 = drift(a + dt * k3, u, ops)
    return a + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _integrate(a0, control, t0, t1, dt, ops, cap):
    n_steps = max(1, int(round((t1 - t0) / dt)))
    dt = (t1 - t0) / n_steps
    times = t0 + dt * np.arange(n_steps + 1)
    coeffs = np.empty((n_steps + 1, a0.shape[0]))
    coeffs[0] = a0
    for i in range(n_steps):
        u = control.value_at(times[i]) if control is not None else None
        a = _rk4_step(coeffs[i], u, dt, ops)
        if not np.all(np.isfinite(a)) or np.linalg.norm(a) > cap:
            raise BlowUpError(times[i + 1], float(np.linalg.norm(a)))
        coeffs[i + 1] = a
    return times, coeffs, dt


def integrate_forward(a0, control, t_span, dt, ops: GalerkinOperators,
                      blowup_cap=1e8) -> Trajectory:
    """Fixed-step RK4 over t_span; on blow-up, halve dt and retry once.

    The trajectory is stored at every step so the adjoint solver can
    share the grid.
    """
    a0 = np.asarray(a0, dtype=float)
    t0, t1 = float(t_span[0]), float(t_span[1])
    try:
        times, coeffs, dt_used = _integrate(a0, control, t0, t1, dt, ops, blowup_cap)
        retried = False
    except BlowUpError:
        times, coeffs, dt_used = _integrate(a0, control, t0, t1, 0.5 * dt, ops,
                                            blowup_cap)
        retried = True
    traj = Trajectory(times, coeffs, {"dt": dt_used, "halved_retry": retried})
    traj.meta["max_mass_drift"] = traj.max_mass_drift(ops)
    return traj
