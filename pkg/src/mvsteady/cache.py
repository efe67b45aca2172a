"""Operator cache: versioned on-disk store for assembled Galerkin operators.

Assembly of the interaction and control tensors is the expensive part of
a run (quadratic-cubic in mode count), so repeated runs with identical
(model, resolution, temperature) reuse a cached copy.  Files are npz
archives with a schema version and the full key stored alongside the
arrays; any mismatch falls back to fresh assembly.
"""

import hashlib
import os

import numpy as np

from .spectral import GalerkinOperators, assemble_operators

CACHE_SCHEMA = 1


def operator_key(model, modes_per_axis, quad_points, beta_inv, with_control):
    parts = [f"schema={CACHE_SCHEMA}", f"model={model.name}"]
    for k in sorted(model.params):
        parts.append(f"{k}={model.params[k]!r}")
    parts.append(f"modes={modes_per_axis}")
    parts.append(f"quad={quad_points}")
    parts.append(f"beta_inv={float(beta_inv)!r}")
    parts.append(f"control={bool(with_control)}")
    return hashlib.sha256("|".join(parts).encode()).hexdigest()


def save_operators(path, ops, key):
    arrays = {"A": ops.A, "M": ops.M, "C": ops.C, "B": ops.B,
              "zeta": ops.zeta}
    if ops.D is not None:
        arrays["D"] = ops.D
    tmp = f"{path}.tmp.npz"
    np.savez_compressed(tmp, schema=np.int64(CACHE_SCHEMA),
                        key=np.array(key), **arrays)
    os.replace(tmp, path)


def load_operators(path, key, basis, quad, beta_inv, model_id=""):
    """Return cached operators, or None when absent/stale/mismatched."""
    if not os.path.exists(path):
        return None
    try:
        with np.load(path) as data:
            if int(data["schema"]) != CACHE_SCHEMA:
                return None
            if str(data["key"]) != key:
                return None
            return GalerkinOperators(
                basis=basis, quad=quad, beta_inv=float(beta_inv),
                A=data["A"], M=data["M"], C=data["C"], B=data["B"],
                zeta=data["zeta"],
                D=data["D"] if "D" in data.files else None,
                model_id=model_id)
    except (OSError, KeyError, ValueError):
        return None


def assemble_cached(model, basis, quad, beta_inv, with_control, cache_dir):
    """Assemble operators, consulting the cache directory when given."""
    if not cache_dir:
        return assemble_operators(model, basis, quad, beta_inv=beta_inv,
                                  with_control=with_control)
    key = operator_key(model, basis.ell, quad.points_per_axis,
                       beta_inv, with_control)
    path = os.path.join(cache_dir, f"ops-{key[:16]}.npz")
    ops = load_operators(path, key, basis, quad, beta_inv,
                         model_id=model.name)
    if ops is not None:
        return ops
    ops = assemble_operators(model, basis, quad, beta_inv=beta_inv,
                             with_control=with_control)
    os.makedirs(cache_dir, exist_ok=True)
    save_operators(path, ops, key)
    return ops
