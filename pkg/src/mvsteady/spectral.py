"""Spectral Galerkin discretization on the periodic torus.

Real orthonormal Fourier basis (constant mode first, then cosine/sine
pairs per wavenumber; tensor products in 2D), Gauss-Legendre quadrature
mapped to the domain, and dense assembly of the operators entering the
weak form of the nonlocal drift-diffusion equation

    d/dt rho = div(rho * (gradW * rho + gradV)) + beta^-1 * laplace rho.

Index conventions for the assembled arrays, with m always the test index:

    A[m, n]      = int grad(psi_n) . grad(psi_m)
    M[m, n]      = int psi_n psi_m
    C[m, n]      = int psi_n (gradV . grad(psi_m))
    B[n, k, m]   = int psi_n (gradW * psi_k) . grad(psi_m)
    D[j, k, m, i] = int psi_i psi_k d/dx_j psi_m
    zeta[n]      = int psi_n

so that the quadratic term is b(a)_m = a^T B[:, :, m] a and the control
term is d(a, u)_m = sum_{i,k,j} a_i u[k, j] D[j, k, m, i].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import roots_legendre


@dataclass(frozen=True)
class TorusDomain:
    """Periodic box: [lower_i, lower_i + size_i) per axis."""

    lower: tuple
    size: tuple

    def __post_init__(self):
        if len(self.lower) != len(self.size):
            raise ValueError("lower and size must have equal length")
        if len(self.size) not in (1, 2):
            raise ValueError("only 1D and 2D domains are supported")
        if any(s <= 0 for s in self.size):
            raise ValueError("domain size must be positive")

    @property
    def dim(self):
        return len(self.size)

    @property
    def volume(self):
        return float(np.prod(self.size))

    def wrap_difference(self, z):
        """Map componentwise differences into [-size/2, size/2)."""
        z = np.asarray(z, dtype=float)
        size = np.array(self.size)
        return (z + 0.5 * size) % size - 0.5 * size


def _as_points(x, dim):
    """Accept (N,), scalar, or (N, dim) input; return (N, dim)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim == 1:
        if dim == 1:
            x = x[:, None]
        else:
            x = x.reshape(1, dim)
    if x.shape[-1] != dim:
        raise ValueError(f"points have dimension {x.shape[-1]}, expected {dim}")
    return x


class SpectralBasis:
    """Real orthonormal Fourier basis on a torus.

    1D ordering: [1/sqrt(S), cos(w x), sin(w x), cos(2 w x), sin(2 w x), ...]
    with w = 2 pi / S, up to wavenumber ``ell``, hence L = 2 ell + 1
    functions.  2D bases are tensor products with lexicographic ordering
    over the per-axis 1D indices, so the constant mode is first and
    L = (2 ell + 1)^dim.
    """

    def __init__(self, domain: TorusDomain, ell: int):
        if ell < 1:
            raise ValueError("ell must be at least 1")
        self.domain = domain
        self.ell = int(ell)
        self.n_axis = 2 * self.ell + 1
        self.n_modes = self.n_axis ** domain.dim
        self.omega = tuple(2.0 * math.pi / s for s in domain.size)
        # per-axis tables: wavenumber and parity (0 const, 1 cos, 2 sin)
        k1 = np.zeros(self.n_axis, dtype=int)
        p1 = np.zeros(self.n_axis, dtype=int)
        k1[1::2] = np.arange(1, self.ell + 1)
        k1[2::2] = np.arange(1, self.ell + 1)
        p1[1::2] = 1
        p1[2::2] = 2
        self._k1, self._p1 = k1, p1
        if domain.dim == 1:
            self.wavenumbers = k1.copy()[:, None]
        else:
            ka, kb = np.meshgrid(k1, k1, indexing="ij")
            self.wavenumbers = np.stack([ka.ravel(), kb.ravel()], axis=1)

    def _axis_tables(self, x, axis):
        """Values and derivatives of the 1D factor basis along one axis."""
        w = self.omega[axis]
        s = self.domain.size[axis]
        scale = math.sqrt(2.0 / s)
        arg = np.multiply.outer(x, w * np.arange(1, self.ell + 1))
        val = np.empty((x.shape[0], self.n_axis))
        der = np.empty_like(val)
        val[:, 0] = 1.0 / math.sqrt(s)
        der[:, 0] = 0.0
        c, sn = np.cos(arg), np.sin(arg)
        kw = w * np.arange(1, self.ell + 1)
        val[:, 1::2] = scale * c
        val[:, 2::2] = scale * sn
        der[:, 1::2] = -scale * kw * sn
        der[:, 2::2] = scale * kw * c
        return val, der

    def evaluate(self, points):
        """Basis values at arbitrary points, shape (N, L)."""
        pts = _as_points(points, self.domain.dim)
        v0, _ = self._axis_tables(pts[:, 0], 0)
        if self.domain.dim == 1:
            return v0
        v1, _ = self._axis_tables(pts[:, 1], 1)
        return np.einsum("ni,nj->nij", v0, v1).reshape(pts.shape[0], -1)

    def gradient(self, points):
        """Basis gradients at arbitrary points, shape (N, L, dim)."""
        pts = _as_points(points, self.domain.dim)
        v0, d0 = self._axis_tables(pts[:, 0], 0)
        if self.domain.dim == 1:
            return d0[:, :, None]
        v1, d1 = self._axis_tables(pts[:, 1], 1)
        n = pts.shape[0]
        gx = np.einsum("ni,nj->nij", d0, v1).reshape(n, -1)
        gy = np.einsum("ni,nj->nij", v0, d1).reshape(n, -1)
        return np.stack([gx, gy], axis=2)

    def stiffness_eigenvalues(self):
        """Exact diagonal of A in this basis: |k . omega|^2 per mode."""
        w = np.array(self.omega)
        return np.sum((self.wavenumbers * w) ** 2, axis=1)

    def translate_coefficients(self, coeffs, shift):
        """Coefficients of x -> rho(x - shift), exact in this basis."""
        coeffs = np.asarray(coeffs, dtype=float)
        shift = np.atleast_1d(np.asarray(shift, dtype=float))
        out = coeffs.copy()
        if self.domain.dim == 1:
            return self._rotate_axis(out, shift[0], 0, stride=1, blocks=1)
        # axis 0 varies over the outer index, axis 1 over the inner
        out = self._rotate_axis(out, shift[0], 0, stride=self.n_axis, blocks=1)
        out = self._rotate_axis(out, shift[1], 1, stride=1, blocks=self.n_axis)
        return out

    def _rotate_axis(self, coeffs, shift, axis, stride, blocks):
        w = self.omega[axis]
        out = coeffs.copy()
        arr = out.reshape(blocks, self.n_axis, stride) if stride > 1 or blocks > 1 else out.reshape(1, self.n_axis, 1)
        for k in range(1, self.ell + 1):
            th = k * w * shift
            c, s = math.cos(th), math.sin(th)
            ic, isn = 2 * k - 1, 2 * k
            a = arr[:, ic, :].copy()
            b = arr[:, isn, :].copy()
            arr[:, ic, :] = c * a - s * b
            arr[:, isn, :] = s * a + c * b
        return arr.reshape(coeffs.shape)


def build_basis(domain: TorusDomain, ell: int) -> SpectralBasis:
    return SpectralBasis(domain, ell)


@dataclass(frozen=True)
class QuadratureRule:
    """Mapped Gauss-Legendre nodes/weights; 2D rules are tensor products."""

    nodes: np.ndarray     # (N, dim)
    weights: np.ndarray   # (N,)
    points_per_axis: int

    def integrate(self, values):
        return float(np.dot(self.weights, np.asarray(values)))


def build_quadrature(domain: TorusDomain, points_per_axis: int) -> QuadratureRule:
    if points_per_axis < 2:
        raise ValueError("points_per_axis must be at least 2")
    t, w = roots_legendre(points_per_axis)
    axes, wts = [], []
    for lo, s in zip(domain.lower, domain.size):
        axes.append(lo + 0.5 * s * (t + 1.0))
        wts.append(0.5 * s * w)
    if domain.dim == 1:
        nodes = axes[0][:, None]
        weights = wts[0]
    else:
        xa, xb = np.meshgrid(axes[0], axes[1], indexing="ij")
        nodes = np.stack([xa.ravel(), xb.ravel()], axis=1)
        weights = np.outer(wts[0], wts[1]).ravel()
    return QuadratureRule(nodes=nodes, weights=weights, points_per_axis=points_per_axis)


def suggest_quadrature(ell: int) -> int:
    """Points per axis for Gram-matrix accuracy ~1e-10 with products of modes.

    Calibrated empirically for mapped Gauss-Legendre rules; the classical
    2*ell+1 count only suffices for uniform rules on the torus.
    """
    return int(math.ceil(3.7 * ell)) + 12


def uniform_mesh(domain: TorusDomain, points_per_axis: int):
    """Uniform periodic mesh (endpoint excluded), shape (N, dim)."""
    axes = [lo + np.arange(points_per_axis) * (s / points_per_axis)
            for lo, s in zip(domain.lower, domain.size)]
    if domain.dim == 1:
        return axes[0][:, None]
    xa, xb = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.stack([xa.ravel(), xb.ravel()], axis=1)


@dataclass
class GalerkinOperators:
    """Assembled dense operators for one (model, basis, quadrature, beta) tuple."""

    basis: SpectralBasis
    quad: QuadratureRule
    beta_inv: float
    A: np.ndarray
    M: np.ndarray
    C: np.ndarray
    B: np.ndarray                   # (L, L, L), B[n, k, m]
    zeta: np.ndarray
    D: np.ndarray | None = None     # (dim, L, L, L), D[j, k, m, i]
    model_id: str = ""
    _Bsym: np.ndarray = field(default=None, repr=False)
    _M_chol: tuple = field(default=None, repr=False)

    @property
    def n_modes(self):
        return self.basis.n_modes

    @property
    def Bsym(self):
        """B[i, k, m] + B[k, i, m], the Jacobian contraction kernel."""
        if self._Bsym is None:
            self._Bsym = self.B + np.swapaxes(self.B, 0, 1)
        return self._Bsym

    def mass_solve(self, rhs):
        """Apply M^-1 (Cholesky, factorized once)."""
        if self._M_chol is None:
            self._M_chol = cho_factor(self.M)
        return cho_solve(self._M_chol, rhs)

    def bilinear(self, a):
        """b(a)_m = a^T B[:, :, m] a."""
        return np.einsum("km,k->m", np.einsum("nkm,n->km", self.B, a), a)

    def bilinear_jacobian(self, a):
        """d b(a) / d a, shape (L, L) with rows the test index m."""
        return np.einsum("ikm,k->mi", self.Bsym, a)

    def control_matrix(self, a, j):
        """E_j(a)[m, k] = sum_i D[j, k, m, i] a_i."""
        return np.einsum("kmi,i->mk", self.D[j], a)

    def control_term(self, a, u):
        """d(a, u)_m for control coefficients u of shape (L, dim)."""
        out = np.zeros(self.n_modes)
        for j in range(self.basis.domain.dim):
            out += np.einsum("kmi,i,k->m", self.D[j], a, u[:, j])
        return out

    def control_term_jacobian(self, a, u):
        """d/da of the control term at fixed u, shape (L, L)."""
        out = np.zeros((self.n_modes, self.n_modes))
        for j in range(self.basis.domain.dim):
            out += np.einsum("kmi,k->mi", self.D[j], u[:, j])
        return out


def assemble_operators(model, basis: SpectralBasis, quad: QuadratureRule,
                       beta_inv: float, with_control: bool = False) -> GalerkinOperators:
    """Dense Galerkin assembly by quadrature.

    All contractions are pure array products over precomputed basis
    tables, so results do not depend on evaluation order.
    """
    if beta_inv <= 0:
        raise ValueError("beta_inv must be positive")
    pts, w = quad.nodes, quad.weights
    P = basis.evaluate(pts)                # (N, L)
    G = basis.gradient(pts)                # (N, L, dim)
    Pw = P * w[:, None]
    dim = basis.domain.dim
    L = basis.n_modes

    M = Pw.T @ P
    M = 0.5 * (M + M.T)
    A = sum(G[:, :, j].T @ (G[:, :, j] * w[:, None]) for j in range(dim))
    A = 0.5 * (A + A.T)
    zeta = Pw.sum(axis=0)

    if model.grad_V is not None:
        gv = model.grad_V(pts)             # (N, dim)
        # C[m, n] = sum_q w_q psi_n (gradV . grad psi_m)
        C = sum((G[:, :, j] * (w * gv[:, j])[:, None]).T @ P for j in range(dim))
    else:
        C = np.zeros((L, L))

    # convolution fields (gradW * psi_k) at the nodes, per axis; the kernel
    # gradient is evaluated in row chunks to bound peak memory
    N = pts.shape[0]
    conv = [np.empty((N, L)) for _ in range(dim)]
    chunk = max(1, int(2e7) // max(N, 1))
    for s in range(0, N, chunk):
        gw = model.grad_W(pts[s:s + chunk], pts)    # (n_c, N, dim)
        for j in range(dim):
            conv[j][s:s + chunk] = gw[:, :, j] @ Pw
    B = np.empty((L, L, L))
    for k in range(L):
        X = sum(conv[j][:, k][:, None] * G[:, :, j] for j in range(dim))  # (N, L) over m
        B[:, k, :] = Pw.T @ X

    D = None
    if with_control:
        D = np.empty((dim, L, L, L))
        for j in range(dim):
            dPj = G[:, :, j]
            for k in range(L):
                # D[j, k, m, i] = sum_q (w psi_k dpsi_m/dx_j)(q) psi_i(q)
                D[j, k] = (dPj * (w * P[:, k])[:, None]).T @ P

    return GalerkinOperators(basis=basis, quad=quad, beta_inv=float(beta_inv),
                             A=A, M=M, C=C, B=B, zeta=zeta, D=D,
                             model_id=getattr(model, "name", ""))


def evaluate_density(coeffs, basis: SpectralBasis, points):
    """Density values sum_n a_n psi_n at the given points."""
    P = basis.evaluate(points)
    return P @ np.asarray(coeffs, dtype=float)


def project_function(values, basis: SpectralBasis, quad: QuadratureRule):
    """L2 projection onto the basis from values at the quadrature nodes."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != quad.nodes.shape[0]:
        raise ValueError("values must be sampled at the quadrature nodes")
    return basis.evaluate(quad.nodes).T @ (quad.weights * values)


def uniform_coefficients(basis: SpectralBasis):
    """Coefficients of the uniform probability density 1/|Omega|."""
    a = np.zeros(basis.n_modes)
    a[0] = 1.0 / math.sqrt(basis.domain.volume)
    return a
