"""Row-wise A-GEM: each embedding row's update is projected so it does not
point against that row's reference (replay) gradient."""
from __future__ import annotations

import numpy as np

from .model import SparseGrad


def project_rows(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Project each row g_i onto the half-space g_i . g_ref_i >= 0.

    Rows already satisfying the constraint, and rows whose reference is
    zero, pass through unchanged.
    """
    g = np.asarray(g, dtype=np.float64)
    g_ref = np.asarray(g_ref, dtype=np.float64)
    if g.shape != g_ref.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {g_ref.shape}")
    squeeze = g.ndim == 1
    g2, r2 = np.atleast_2d(g), np.atleast_2d(g_ref)
    dot = np.einsum("ij,ij->i", g2, r2)
    nrm = np.einsum("ij,ij->i", r2, r2)
    viol = (dot < 0) & (nrm > 0)
    out = g2.copy()
    out[viol] -= (dot[viol] / nrm[viol])[:, None] * r2[viol]
    return out[0] if squeeze else out


def project_sparse(g: SparseGrad, g_ref: SparseGrad) -> SparseGrad:
    """Apply :func:`project_rows` to every row present in both gradients;
    rows only in `g` are left unconstrained."""
    out = {}
    for name, (rows, vals) in g.items():
        vals = vals.copy()
        if name in g_ref:
            ref_rows, ref_vals = g_ref[name]
            common, gi, ri = np.intersect1d(rows, ref_rows, assume_unique=True, return_indices=True)
            if len(common):
                vals[gi] = project_rows(vals[gi], ref_vals[ri])
        out[name] = (rows.copy(), vals)
    return SparseGrad(out)
