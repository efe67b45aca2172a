"""Verification and classification of computed steady states.

Three independent characterizations are evaluated per state: the free
energy (entropy + confinement + interaction), the fixed-point map
rho -> Z^-1 exp(-beta(V + W*rho)), and, for the two-frequency cosine
model, the order-parameter self-consistency equation.  The fixed-point
iteration on quadrature nodes doubles as an initial-guess generator for
the two-dimensional attractive kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral import evaluate_density, uniform_mesh

CLAMP_FLOOR = 1e-12


def interaction_matrix(model, quad):
    """K[i, j] = W(x_i - y_j) w_j so that (K rho)(x_i) approximates W*rho."""
    n = quad.nodes.shape[0]
    K = np.empty((n, n))
    chunk = max(1, int(2e7) // max(n, 1))
    for s in range(0, n, chunk):
        K[s:s + chunk] = model.W(quad.nodes[s:s + chunk], quad.nodes)
    return K * quad.weights[None, :]


def mean_field_potential(model, quad, rho_nodes, K=None):
    """V(x) + (W * rho)(x) on the quadrature nodes."""
    if K is None:
        K = interaction_matrix(model, quad)
    h = K @ rho_nodes
    if model.V is not None:
        h = h + model.V(quad.nodes)
    return h


@dataclass
class FreeEnergyReport:
    entropy: float
    confinement: float
    interaction: float
    clamped_fraction: float

    @property
    def total(self):
        return self.entropy + self.confinement + self.interaction

    def as_dict(self):
        return {"entropy": self.entropy, "confinement": self.confinement,
                "interaction": self.interaction, "total": self.total,
                "clamped_fraction": self.clamped_fraction}


def free_energy(a, model, basis, quad, beta_inv, K=None) -> FreeEnergyReport:
    """Entropy, confinement and interaction terms by quadrature.

    The density is clamped at 1e-12 inside the entropy integrand; the
    report records the fraction of clamped nodes (heavy clamping flags an
    unreliable value).
    """
    rho = evaluate_density(a, basis, quad.nodes)
    clamped = rho < CLAMP_FLOOR
    rho_c = np.maximum(rho, CLAMP_FLOOR)
    entropy = beta_inv * quad.integrate(rho_c * np.log(rho_c))
    confinement = 0.0
    if model.V is not None:
        confinement = quad.integrate(model.V(quad.nodes) * rho)
    if K is None:
        K = interaction_matrix(model, quad)
    interaction = 0.5 * quad.integrate(rho * (K @ rho))
    return FreeEnergyReport(float(entropy), float(confinement),
                            float(interaction), float(clamped.mean()))


def free_energy_gradient_check(a, model, basis, quad, beta_inv, n_directions=20,
                               step=1e-5, seed=0):
    """Max |directional derivative| of F along random mass-neutral directions."""
    rng = np.random.default_rng(seed)
    K = interaction_matrix(model, quad)
    zeta = np.zeros(basis.n_modes)
    zeta[0] = np.sqrt(basis.domain.volume)
    worst = 0.0
    for _ in range(n_directions):
        v = rng.standard_normal(basis.n_modes)
        v -= (zeta @ v) / (zeta @ zeta) * zeta
        v /= np.linalg.norm(v)
        fp = free_energy(a + step * v, model, basis, quad, beta_inv, K).total
        fm = free_energy(a - step * v, model, basis, quad, beta_inv, K).total
        worst = max(worst, abs(fp - fm) / (2.0 * step))
    return worst


def kirkwood_monroe_residual(a, model, basis, quad, beta_inv, K=None):
    """L2 distance between rho and Z^-1 exp(-beta(V + W*rho))."""
    rho = evaluate_density(a, basis, quad.nodes)
    h = mean_field_potential(model, quad, rho, K)
    expo = -h / beta_inv
    expo -= expo.max()
    num = np.exp(expo)
    rho_hat = num / quad.integrate(num)
    return float(np.sqrt(quad.integrate((rho - rho_hat) ** 2)))


def fixed_point_iterate(rho0, model, beta_inv, quad, tol=1e-10, max_iter=2000,
                        damping=1.0):
    """Damped iteration rho <- (1-tau) rho + tau Z^-1 exp(-beta(V + W*rho)).

    Operates on quadrature-node values; returns (rho, info).  Undamped
    iteration (tau=1) oscillates at low temperature, so presets pass
    tau=0.5 there.
    """
    rho = np.asarray(rho0, dtype=float).copy()
    K = interaction_matrix(model, quad)
    V = model.V(quad.nodes) if model.V is not None else 0.0
    info = {"converged": False, "n_iter": 0, "last_increment": np.inf}
    for it in range(1, max_iter + 1):
        expo = -(K @ rho + V) / beta_inv
        expo -= expo.max()
        num = np.exp(expo)
        target = num / quad.integrate(num)
        new = (1.0 - damping) * rho + damping * target
        inc = float(np.sqrt(quad.integrate((new - rho) ** 2)))
        rho = new
        info["n_iter"] = it
        info["last_increment"] = inc
        if inc <= tol:
            info["converged"] = True
            break
    return rho, info


def self_consistency_map(m, alpha, kappa, beta_inv, n_grid=2048):
    """R(m) = (int cos rho_m, int sin rho_m) for the two-frequency model.

    rho_m is the normalized exponential with exponent
    (-alpha cos 2x + kappa (m1 cos x + m2 sin x)) / beta_inv on [0, 2pi];
    the uniform trapezoid grid is spectrally accurate here.
    """
    x = np.linspace(0.0, 2.0 * np.pi, n_grid, endpoint=False)
    expo = (-alpha * np.cos(2.0 * x)
            + kappa * (m[0] * np.cos(x) + m[1] * np.sin(x))) / beta_inv
    expo -= expo.max()
    w = np.exp(expo)
    w /= w.sum()
    return np.array([float(np.cos(x) @ w), float(np.sin(x) @ w)])


def scan_symmetric_fixed_points(alpha, kappa, beta_inv, bounds=(-2.0, 2.0),
                                n_grid=400, tol=1e-12):
    """All crossings of m1 = R1(m1, 0) by grid sign changes plus bisection."""
    def g(m1):
        return self_consistency_map((m1, 0.0), alpha, kappa, beta_inv)[0] - m1

    grid = np.linspace(bounds[0], bounds[1], n_grid)
    vals = np.array([g(m) for m in grid])
    roots = []
    for i in range(n_grid - 1):
        if vals[i] == 0.0:
            roots.append(grid[i])
            continue
        if vals[i] * vals[i + 1] < 0.0:
            lo, hi = grid[i], grid[i + 1]
            flo = vals[i]
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                fm = g(mid)
                if flo * fm <= 0.0:
                    hi = mid
                else:
                    lo, flo = mid, fm
            roots.append(0.5 * (lo + hi))
    if vals[-1] == 0.0:
        roots.append(grid[-1])
    return np.array(roots)


@dataclass
class OrderParameter:
    m1: float
    m2: float
    logZ: float
    fit_residual: float
    self_consistency_gap: float = float("nan")

    def as_dict(self):
        return {"m1": self.m1, "m2": self.m2, "logZ": self.logZ,
                "fit_residual": self.fit_residual,
                "self_consistency_gap": self.self_consistency_gap}


def estimate_order_parameters(a, basis, alpha, kappa, beta_inv,
                              n_grid=512) -> OrderParameter:
    """Least-squares fit of log rho + V/beta_inv on [1, k cos x, k sin x].

    With the stationary profile rho = Z^-1 exp((-alpha cos 2x
    + kappa(m1 cos x + m2 sin x))/beta_inv), the regression recovers
    (-log Z, m1, m2) exactly up to truncation; the self-consistency gap
    ||m - R(m)|| is filled in afterwards.
    """
    mesh = uniform_mesh(basis.domain, n_grid)
    rho = evaluate_density(a, basis, mesh)
    if rho.min() < -1e-8:
        raise ValueError("density negative on the regression grid")
    x = mesh[:, 0]
    y = np.log(np.maximum(rho, CLAMP_FLOOR)) + alpha * np.cos(2.0 * x) / beta_inv
    X = np.column_stack([np.ones_like(x),
                         (kappa / beta_inv) * np.cos(x),
                         (kappa / beta_inv) * np.sin(x)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = float(np.linalg.norm(X @ coef - y) / np.sqrt(n_grid))
    m = np.array([coef[1], coef[2]])
    gap = float(np.linalg.norm(m - self_consistency_map(m, alpha, kappa, beta_inv)))
    return OrderParameter(float(coef[1]), float(coef[2]), float(-coef[0]),
                          resid, gap)


def fit_exponential_profile(a, basis, beta_inv, n_grid=512):
    """Fit log rho = c0 + p cos(w x) + q sin(w x), w the fundamental frequency.

    Used for the single-frequency confinement model whose steady states
    are rho ~ exp(alpha cos(w x)); returns (alpha, phase-quadrature part,
    rms fit residual).
    """
    mesh = uniform_mesh(basis.domain, n_grid)
    rho = evaluate_density(a, basis, mesh)
    x = mesh[:, 0]
    w = 2.0 * np.pi / basis.domain.size[0]
    y = np.log(np.maximum(rho, CLAMP_FLOOR))
    X = np.column_stack([np.ones_like(x), np.cos(w * x), np.sin(w * x)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = float(np.linalg.norm(X @ coef - y) / np.sqrt(n_grid))
    return float(coef[1]), float(coef[2]), resid


def linear_growth_rate(a, ops):
    """Largest real part of the linearized drift spectrum at ``a``.

    The drift Jacobian -(beta^-1 A + C + b'(a)) is restricted to the
    mass-neutral subspace before taking eigenvalues, since the conserved
    mass direction carries a structural zero that says nothing about
    stability.
    """
    a = np.asarray(a, dtype=float)
    J = -(ops.beta_inv * ops.A + ops.C) - ops.bilinear_jacobian(a)
    zeta = ops.zeta / np.linalg.norm(ops.zeta)
    e = np.zeros_like(zeta)
    e[0] = 1.0
    w = zeta - e if zeta[0] >= 0 else zeta + e
    if w @ w < 1e-28:
        # mass row is the constant mode itself; complement is trivial
        Q = np.eye(len(zeta))[:, 1:]
    else:
        H = np.eye(len(zeta)) - 2.0 * np.outer(w, w) / (w @ w)
        Q = H[:, 1:]
    return float(np.linalg.eigvals(Q.T @ J @ Q).real.max())


def classify_stability(sset, ops, model, dynamics=None, tie_tol=1e-9,
                       horizon=5.0, dt=0.01, perturbation=1e-3, seed=0,
                       probe_factor=10.0):
    """Fill entry.stability for every state in the set.

    Primary: free-energy ranking (global minimizers within tie_tol are
    stable, the rest unstable).  Secondary: a perturbed evolution probe;
    a definite probe verdict (growth or decay beyond probe_factor)
    overrides the ranking, since local minimizers that are not global are
    still dynamically stable.  Requires entry.free_energy to be filled.
    """
    if not sset.entries:
        return
    totals = [e.free_energy["total"] for e in sset.entries]
    fmin = min(totals)
    rng = np.random.default_rng(seed)
    # keep the probe step inside the RK4 stability region of the stiffest mode
    stiffest = ops.beta_inv * ops.basis.stiffness_eigenvalues().max()
    if stiffest > 0:
        dt = min(dt, 2.5 / stiffest)
    for e, total in zip(sset.entries, totals):
        verdict = "stable" if total <= fmin + tie_tol else "unstable"
        if dynamics is not None:
            v = rng.standard_normal(e.coefficients.shape)
            v -= (ops.zeta @ v) / (ops.zeta @ ops.zeta) * ops.zeta
            v *= perturbation / np.linalg.norm(v)
            try:
                traj = dynamics.integrate_forward(e.coefficients + v, None,
                                                  (0.0, horizon), dt, ops)
                d0 = np.linalg.norm(v)
                d1 = np.linalg.norm(traj.final - e.coefficients)
                if d1 >= probe_factor * d0:
                    verdict = "unstable"
                elif d1 <= d0 / probe_factor:
                    verdict = "stable"
            except Exception:
                pass    # probe blow-up: keep the ranking verdict
        e.stability = verdict


def verify_steady_states(sset, model, ops, order_parameter_params=None,
                         dynamics=None, exponential_fit=False):
    """Annotate a SteadyStateSet with all verification records and sort it.

    order_parameter_params: optional (alpha, kappa) enabling the
    regression/self-consistency block for the two-frequency model.
    """
    basis, quad, beta_inv = ops.basis, ops.quad, ops.beta_inv
    K = interaction_matrix(model, quad)
    for e in sset.entries:
        rep = free_energy(e.coefficients, model, basis, quad, beta_inv, K)
        e.free_energy = rep.as_dict()
        e.km_residual = kirkwood_monroe_residual(e.coefficients, model, basis,
                                                 quad, beta_inv, K)
        if order_parameter_params is not None:
            alpha, kappa = order_parameter_params
            op = estimate_order_parameters(e.coefficients, basis, alpha, kappa,
                                           beta_inv)
            e.order_parameters = op.as_dict()
            e.self_consistency_gap = op.self_consistency_gap
        if exponential_fit:
            p, q, resid = fit_exponential_profile(e.coefficients, basis, beta_inv)
            e.exponent_fit = {"cos": p, "sin": q, "fit_residual": resid}
    classify_stability(sset, ops, model, dynamics=dynamics)
    sset.sort_by_free_energy()
    return sset
