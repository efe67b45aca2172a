"""Deflated Newton enumeration of steady states.

The stationary Galerkin system is overdetermined by one mass-constraint
row; Newton steps solve the linearized system in the least-squares sense.
Known roots are removed by multiplying the residual with the standard
shifted deflation factor (1/eta + xi), eta the product of ||a - r||^p
over deflated roots, so the iteration cannot converge to a root twice.
The outer loop restarts from the same initial guess after every success
and stops at the first failure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lstsq
from scipy.optimize import minimize_scalar

from .spectral import GalerkinOperators, evaluate_density, uniform_mesh


class ResidualSystem:
    """F(a): L unknowns, L+1 equations (stationarity rows plus mass row).

    Rows 1..L:  -beta^-1 A a - C a - b(a)
    Row L+1:    zeta . a - 1
    """

    def __init__(self, ops: GalerkinOperators):
        self.ops = ops
        self.linear = ops.beta_inv * ops.A + ops.C

    @property
    def n_unknowns(self):
        return self.ops.n_modes

    @property
    def n_equations(self):
        return self.ops.n_modes + 1

    def residual(self, a):
        out = np.empty(self.n_equations)
        out[:-1] = -self.linear @ a - self.ops.bilinear(a)
        out[-1] = self.ops.zeta @ a - 1.0
        return out

    def jacobian(self, a):
        out = np.empty((self.n_equations, self.n_unknowns))
        out[:-1] = -self.linear - self.ops.bilinear_jacobian(a)
        out[-1] = self.ops.zeta
        return out


class DeflatedSystem:
    """Residual of ``base`` multiplied by the deflation factor 1/eta + xi.

    eta and its gradient are accumulated by the product recursion
    eta_n = eta_{n-1} tau, eta_n' = eta_{n-1}' tau + eta_{n-1} tau'
    with tau = ||a - r||^p per deflated root r.
    """

    def __init__(self, base, roots, power, shift):
        self.base = base
        self.roots = [np.asarray(r, dtype=float) for r in roots]
        self.power = float(power)
        self.shift = float(shift)

    def _eta(self, a):
        eta = 1.0
        grad = np.zeros_like(a)
        p = self.power
        for r in self.roots:
            d = a - r
            nd = float(np.linalg.norm(d))
            if nd == 0.0:
                return 0.0, grad
            tau = nd ** p
            tau_grad = p * nd ** (p - 2.0) * d
            grad = grad * tau + eta * tau_grad
            eta = eta * tau
        return eta, grad

    def residual(self, a):
        F = self.base.residual(a)
        if not self.roots:
            return F
        eta, _ = self._eta(a)
        return F * (1.0 / eta + self.shift)

    def jacobian(self, a):
        J = self.base.jacobian(a)
        if not self.roots:
            return J
        F = self.base.residual(a)
        eta, grad = self._eta(a)
        return (1.0 / eta + self.shift) * J - np.outer(F, grad) / eta ** 2


@dataclass
class NewtonConfig:
    step_tol: float = 1e-10
    max_iter: int = 1000
    divergence_cap: float = 1e8


@dataclass
class NewtonResult:
    a: np.ndarray
    converged: bool
    n_iter: int
    step_norm: float
    reason: str


def newton_solve(system, a0, cfg: NewtonConfig = None) -> NewtonResult:
    """Least-squares Newton iteration on a rectangular residual system."""
    cfg = cfg or NewtonConfig()
    a = np.array(a0, dtype=float)
    step_norm = np.inf
    for it in range(1, cfg.max_iter + 1):
        F = system.residual(a)
        J = system.jacobian(a)
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(J))):
            return NewtonResult(a, False, it, step_norm, "non-finite residual")
        try:
            step = lstsq(J, F, lapack_driver="gelsy")[0]
        except Exception:
            return NewtonResult(a, False, it, step_norm, "linear solve failed")
        if not np.all(np.isfinite(step)):
            return NewtonResult(a, False, it, step_norm, "linear solve failed")
        a = a - step
        step_norm = float(np.linalg.norm(step))
        if np.linalg.norm(a) > cfg.divergence_cap:
            return NewtonResult(a, False, it, step_norm, "iterate diverged")
        if step_norm <= cfg.step_tol:
            return NewtonResult(a, True, it, step_norm, "converged")
    return NewtonResult(a, False, cfg.max_iter, step_norm, "iteration cap")


@dataclass
class DeflationConfig:
    power: float = 2.0
    shift: float = 1.0
    accept_tol: float = 1e-9
    dedup_tol: float = 1e-6
    pos_tol: float = 1e-8
    max_roots: int = 12
    filter_points: int = 512
    translation_tol: float = 1e-4
    nudge_eps: float = 1e-4
    seed: int = 0


@dataclass
class SteadyState:
    coefficients: np.ndarray
    residual_norm: float
    newton_iters: int
    min_density: float = float("nan")
    positive: bool = True
    free_energy: dict = None
    km_residual: float = None
    stability: str = "unknown"
    order_parameters: dict = None
    exponent_fit: dict = None
    self_consistency_gap: float = None
    translation_of: int = None


@dataclass
class SteadyStateSet:
    entries: list = field(default_factory=list)
    discarded: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def coefficient_array(self):
        return np.array([e.coefficients for e in self.entries])

    def sort_by_free_energy(self):
        if all(e.free_energy is not None for e in self.entries):
            order = sorted(range(len(self.entries)),
                           key=lambda i: self.entries[i].free_energy["total"])
            remap = {old: new for new, old in enumerate(order)}
            self.entries = [self.entries[i] for i in order]
            for e in self.entries:
                if e.translation_of is not None:
                    e.translation_of = remap[e.translation_of]


def translation_distance(basis, a_i, a_j, scan_points=256):
    """Min over shifts s of ||translate(a_i, s) - a_j||_2, plus the shift.

    Coefficients are orthonormal, so the euclidean coefficient distance is
    the L2 density distance.  The scan is refined by bounded scalar
    minimization per axis (coordinate sweeps in 2D).
    """
    a_i = np.asarray(a_i, dtype=float)
    a_j = np.asarray(a_j, dtype=float)
    dim = basis.domain.dim
    size = np.array(basis.domain.size)

    def dist(shift):
        return float(np.linalg.norm(basis.translate_coefficients(a_i, shift) - a_j))

    if dim == 1:
        grid = np.linspace(0.0, size[0], scan_points, endpoint=False)
        vals = [dist((s,)) for s in grid]
        k = int(np.argmin(vals))
        h = size[0] / scan_points
        res = minimize_scalar(lambda s: dist((s,)),
                              bounds=(grid[k] - h, grid[k] + h), method="bounded",
                              options={"xatol": 1e-12})
        best = np.array([res.x])
    else:
        n = max(24, scan_points // 8)
        g0 = np.linspace(0.0, size[0], n, endpoint=False)
        g1 = np.linspace(0.0, size[1], n, endpoint=False)
        vals = np.array([[dist((s0, s1)) for s1 in g1] for s0 in g0])
        k0, k1 = np.unravel_index(np.argmin(vals), vals.shape)
        best = np.array([g0[k0], g1[k1]])
        for _ in range(3):
            for ax, g in ((0, g0), (1, g1)):
                h = size[ax] / n
                res = minimize_scalar(
                    lambda s: dist(tuple(np.where(np.arange(2) == ax, s, best))),
                    bounds=(best[ax] - h, best[ax] + h), method="bounded",
                    options={"xatol": 1e-12})
                best[ax] = res.x
    return dist(tuple(best)), best


def _run_chain(base, a0, deflation, newton, rng):
    """One deflation chain: restart from a0 until the first failure."""
    raw, stop_reason = [], "max_roots reached"
    while len(raw) < deflation.max_roots:
        guess = a0.copy()
        if any(np.linalg.norm(guess - r[0]) < 1e-8 for r in raw):
            noise = rng.standard_normal(guess.shape) * deflation.nudge_eps
            noise[0] = 0.0    # keep the guess on the mass shell
            guess = guess + noise
        system = DeflatedSystem(base, [r[0] for r in raw],
                                deflation.power, deflation.shift)
        result = newton_solve(system, guess, newton)
        if not result.converged:
            stop_reason = f"newton: {result.reason}"
            break
        res_norm = float(np.linalg.norm(base.residual(result.a)))
        if res_norm > deflation.accept_tol:
            stop_reason = f"residual {res_norm:.2e} above accept_tol"
            break
        if any(np.abs(result.a - r[0]).max() <= deflation.dedup_tol for r in raw):
            stop_reason = "revisited a deflated root"
            break
        raw.append((result.a, res_norm, result.n_iter))
    return raw, stop_reason


def find_all_steady_states(ops: GalerkinOperators, a0, deflation: DeflationConfig = None,
                           newton: NewtonConfig = None) -> SteadyStateSet:
    """Run the deflation loop and post-process the collected roots.

    ``a0`` is a single initial guess or a sequence of guesses; each guess
    drives an independent chain (success appends the root and re-deflates,
    any Newton failure, residual above accept_tol, or revisit of a known
    root terminates that chain) and the chains' roots are merged with
    cross-chain deduplication.  Accepted roots are then filtered for
    positivity on a uniform mesh and translation-equivalent pairs tagged.
    """
    deflation = deflation or DeflationConfig()
    newton = newton or NewtonConfig()
    base = ResidualSystem(ops)
    starts = np.atleast_2d(np.asarray(a0, dtype=float))
    rng = np.random.default_rng(deflation.seed)

    raw, chain_reasons = [], []
    for start in starts:
        chain, reason = _run_chain(base, start, deflation, newton, rng)
        chain_reasons.append(reason)
        for rec in chain:
            if not any(np.abs(rec[0] - r[0]).max() <= deflation.dedup_tol for r in raw):
                raw.append(rec)
    stop_reason = chain_reasons[-1] if len(starts) == 1 else "; ".join(chain_reasons)

    mesh = uniform_mesh(ops.basis.domain, deflation.filter_points)
    sset = SteadyStateSet()
    for a, res_norm, iters in raw:
        dens = evaluate_density(a, ops.basis, mesh)
        entry = SteadyState(coefficients=a, residual_norm=res_norm,
                            newton_iters=iters,
                            min_density=float(dens.min()),
                            positive=bool(dens.min() >= -deflation.pos_tol))
        if entry.positive:
            sset.entries.append(entry)
        else:
            sset.discarded.append(entry)

    for i, e in enumerate(sset.entries):
        for j in range(i):
            d, shift = translation_distance(ops.basis, e.coefficients,
                                            sset.entries[j].coefficients)
            if d <= deflation.translation_tol:
                e.translation_of = j
                break

    sset.meta = {
        "n_found": len(raw),
        "n_positive": len(sset.entries),
        "n_discarded": len(sset.discarded),
        "stop_reason": stop_reason,
        "chain_reasons": chain_reasons,
        "power": deflation.power,
        "shift": deflation.shift,
    }
    return sset
