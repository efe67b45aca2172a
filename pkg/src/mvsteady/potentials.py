"""Confinement and interaction potentials for the supported model families.

Every model carries vectorized callables:

    V(points)          -> (N,)        confinement (None when identically zero)
    grad_V(points)     -> (N, dim)
    W(x, y)            -> (N, M)      pairwise interaction kernel
    grad_W(x, y)       -> (N, M, dim) kernel gradient in the first argument

All kernels are translation invariant and are evaluated through the
wrapped difference on the torus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .spectral import TorusDomain, _as_points


@dataclass
class Model:
    name: str
    domain: TorusDomain
    V: object
    grad_V: object
    W: object
    grad_W: object
    params: dict = field(default_factory=dict)


def bessel_i0(x):
    """Modified Bessel I0 by power series, truncated at relative error 1e-14."""
    x = float(x)
    term, total, k = 1.0, 1.0, 0
    q = 0.25 * x * x
    while term > 1e-14 * total:
        k += 1
        term *= q / (k * k)
        total += term
    return total


def _pair_diff(domain, x, y):
    """Wrapped pairwise differences x_i - y_j, shape (N, M, dim)."""
    x = _as_points(x, domain.dim)
    y = _as_points(y, domain.dim)
    return domain.wrap_difference(x[:, None, :] - y[None, :, :])


def hkb_model(c1=0.0, c2=0.0, kappa=1.0, alpha=None, drift_convention="gradient"):
    """Two-mode confinement with cosine attraction on [0, 2 pi].

    V(x) = -c1 cos x - c2 cos 2x, W(z) = -kappa cos z.  Passing ``alpha``
    is shorthand for c1 = 0, c2 = -alpha, which makes the stationary
    exponent proportional to -(alpha cos 2x - kappa (m1 cos x + m2 sin x)).

    drift_convention selects the sign of the confining force: "gradient"
    uses gradV of the potential above (this is the convention whose
    solution counts match the reference experiments); "printed" negates
    it, matching the one evolution equation printed with +2 alpha sin 2x.
    """
    if alpha is not None:
        c1, c2 = 0.0, -float(alpha)
    if drift_convention not in ("gradient", "printed"):
        raise ValueError("drift_convention must be 'gradient' or 'printed'")
    sgn = 1.0 if drift_convention == "gradient" else -1.0
    c1, c2, kappa = float(c1), float(c2), float(kappa)
    domain = TorusDomain(lower=(0.0,), size=(2.0 * math.pi,))

    def V(x):
        x = _as_points(x, 1)[:, 0]
        return sgn * (-c1 * np.cos(x) - c2 * np.cos(2 * x))

    def grad_V(x):
        x = _as_points(x, 1)[:, 0]
        return (sgn * (c1 * np.sin(x) + 2 * c2 * np.sin(2 * x)))[:, None]

    def W(x, y):
        z = _pair_diff(domain, x, y)[:, :, 0]
        return -kappa * np.cos(z)

    def grad_W(x, y):
        z = _pair_diff(domain, x, y)[:, :, 0]
        return (kappa * np.sin(z))[:, :, None]

    params = {"c1": c1, "c2": c2, "kappa": kappa,
              "drift_convention": drift_convention}
    if alpha is not None:
        params["alpha"] = float(alpha)
    if c1 == 0.0 and c2 == 0.0:
        return Model("hkb", domain, None, None, W, grad_W, params)
    return Model("hkb", domain, V, grad_V, W, grad_W, params)


def hkb_sign_convention(alpha, convention="printed"):
    """Descriptor for the confining drift entering the flux term.

    "printed" returns x -> 2 alpha sin 2x exactly as the evolution
    equation prints it; "gradient" returns gradV for V = alpha cos 2x,
    which is its negative.
    """
    alpha = float(alpha)
    sgn = 1.0 if convention == "printed" else -1.0

    def drift(x):
        return sgn * 2.0 * alpha * np.sin(2.0 * np.asarray(x, dtype=float))

    return {"convention": convention, "alpha": alpha, "confining_drift": drift}


def o2_model(eta=0.05):
    """Single-well confinement with first-mode attraction on [0, 1].

    V(x) = -eta cos(2 pi x), W(z) = -cos(2 pi z), eta in (0, 1).
    """
    eta = float(eta)
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    domain = TorusDomain(lower=(0.0,), size=(1.0,))
    tp = 2.0 * math.pi

    def V(x):
        x = _as_points(x, 1)[:, 0]
        return -eta * np.cos(tp * x)

    def grad_V(x):
        x = _as_points(x, 1)[:, 0]
        return (eta * tp * np.sin(tp * x))[:, None]

    def W(x, y):
        z = _pair_diff(domain, x, y)[:, :, 0]
        return -np.cos(tp * z)

    def grad_W(x, y):
        z = _pair_diff(domain, x, y)[:, :, 0]
        return (tp * np.sin(tp * z))[:, :, None]

    return Model("o2", domain, V, grad_V, W, grad_W, {"eta": eta})


def hk_model(radius=0.1, epsilon=0.005):
    """Bounded-confidence attraction on [0, 1], no confinement.

    The interaction force is W'(z) = z inside |z| <= radius; the jump at
    the boundary is regularized by a linear ramp to zero over a width
    ``epsilon``, and W itself is recovered by integration (even, constant
    outside the support, hence smooth across the periodic seam as long as
    radius + epsilon < 1/2).
    """
    r, eps = float(radius), float(epsilon)
    if r <= 0 or eps <= 0 or r + eps >= 0.5:
        raise ValueError("need 0 < radius, 0 < epsilon, radius + epsilon < 1/2")
    domain = TorusDomain(lower=(0.0,), size=(1.0,))

    def force(z):
        """W'(z), odd, with the ramp on r < |z| <= r + eps."""
        az = np.abs(z)
        core = np.where(az <= r, az, 0.0)
        ramp = np.where((az > r) & (az <= r + eps), r * (1.0 - (az - r) / eps), 0.0)
        return np.sign(z) * (core + ramp)

    def Wval(z):
        az = np.abs(z)
        inner = 0.5 * az ** 2
        t = np.clip(az - r, 0.0, eps)
        mid = 0.5 * r ** 2 + r * t - 0.5 * r * t ** 2 / eps
        return np.where(az <= r, inner, mid)

    def W(x, y):
        z = _pair_diff(domain, x, y)[:, :, 0]
        return Wval(z)

    def grad_W(x, y):
        z = _pair_diff(domain, x, y)[:, :, 0]
        return force(z)[:, :, None]

    return Model("hk", domain, None, None, W, grad_W,
                 {"radius": r, "epsilon": eps})


def von_mises_model(theta=1.0, normalization=None):
    """Smooth localized attraction on [-pi, pi]^2, no confinement.

    W(z) = -normalization * exp(theta (cos z1 + cos z2)); the default
    normalization is I0(theta)^-2 so the kernel integrates to -(2 pi)^2
    times a Bessel ratio of order one.
    """
    theta = float(theta)
    if normalization is None:
        normalization = 1.0 / bessel_i0(theta) ** 2
    c = float(normalization)
    domain = TorusDomain(lower=(-math.pi, -math.pi), size=(2.0 * math.pi, 2.0 * math.pi))

    def W(x, y):
        z = _pair_diff(domain, x, y)
        return -c * np.exp(theta * (np.cos(z[:, :, 0]) + np.cos(z[:, :, 1])))

    def grad_W(x, y):
        z = _pair_diff(domain, x, y)
        e = np.exp(theta * (np.cos(z[:, :, 0]) + np.cos(z[:, :, 1])))
        return (c * theta) * np.stack([np.sin(z[:, :, 0]) * e,
                                       np.sin(z[:, :, 1]) * e], axis=2)

    return Model("von_mises", domain, None, None, W, grad_W,
                 {"theta": theta, "normalization": c})


_FACTORIES = {
    "hkb": hkb_model,
    "o2": o2_model,
    "hk": hk_model,
    "von_mises": von_mises_model,
}


def make_model(name, params=None) -> Model:
    """Build a model by family name with keyword parameters."""
    if name not in _FACTORIES:
        raise ValueError(f"unknown model '{name}'; choose from {sorted(_FACTORIES)}")
    return _FACTORIES[name](**(params or {}))
