"""Brute-force dense references for tests and the ``verify`` command.

These paths materialize Jacobians and curvature matrices explicitly and are
only meant for tiny models; each refuses inputs above its size cap.
"""

from __future__ import annotations

import numpy as np

from .curvature import UncertaintyBasis
from .errors import OracleRefusal
from .vae import ReconstructionMap, VAEModel, subset_size

MAX_PARAMS = 4000
MAX_OUTPUTS = 3072


def _cap(p=None, outputs=None, max_params=MAX_PARAMS, max_outputs=MAX_OUTPUTS):
    if p is not None and p > max_params:
        raise OracleRefusal(f"{p} parameters exceed the dense cap of {max_params}")
    if outputs is not None and outputs > max_outputs:
        raise OracleRefusal(f"{outputs} outputs exceed the dense cap of {max_outputs}")


def dense_jacobian(model: VAEModel, x, subset="decoder", max_params=MAX_PARAMS) -> np.ndarray:
    """Full ``(W*H*C, p)`` Jacobian of the reconstruction at a single input."""
    p = subset_size(model, subset)
    n_out = int(np.prod(model.image_shape))
    _cap(p, n_out, max_params)
    x = np.asarray(x, dtype=np.float64)
    rows = np.empty((n_out, p))
    # one output coordinate at a time, no batching tricks
    rm = ReconstructionMap(model, x[None], subset)
    for j in range(n_out):
        e = np.zeros(n_out)
        e[j] = 1.0
        rows[j] = rm.vjp(e.reshape((1,) + model.image_shape))
    return rows


def dense_ggn(model: VAEModel, dataset, subset="decoder", max_params=MAX_PARAMS) -> np.ndarray:
    """``sum_i J_i^T J_i`` assembled from dense per-sample Jacobians."""
    p = subset_size(model, subset)
    _cap(p, max_params=max_params)
    G = np.zeros((p, p))
    for x in np.asarray(dataset, dtype=np.float64).reshape((-1,) + model.image_shape):
        J = dense_jacobian(model, x, subset, max_params)
        G += J.T @ J
    return 0.5 * (G + G.T)


def dense_eigh(A, symmetry_tol=1e-10):
    """Eigenvalues (descending) and eigenvectors of a symmetric matrix."""
    A = np.asarray(A, dtype=np.float64)
    if A.size and np.max(np.abs(A - A.T)) > symmetry_tol * max(1.0, np.max(np.abs(A))):
        raise ValueError("matrix is not symmetric within tolerance")
    vals, vecs = np.linalg.eigh(A)
    order = np.argsort(-vals, kind="stable")
    return vals[order], vecs[:, order]


def projector_matrix(basis: UncertaintyBasis) -> np.ndarray:
    """Dense ``I - U U^T`` (or ``S^T (I - U U^T) S`` for sketched bases)."""
    p = basis.param_dim
    _cap(p)
    if basis.mode == "exact":
        U = basis.columns
        return np.eye(p) - U @ U.T
    S = basis.sketch.materialize()
    U = basis.columns
    return S.T @ (np.eye(S.shape[0]) - U @ U.T) @ S


def exact_trace_and_diag(model: VAEModel, x, basis: UncertaintyBasis):
    """``Tr`` and diagonal of ``J P J^T`` via dense matrix products."""
    J = dense_jacobian(model, x, basis.subset)
    M = J @ projector_matrix(basis) @ J.T
    diag = np.diag(M).copy()
    return float(np.trace(M)), diag


def finite_diff_gradient(lossfn, params, step=1e-5, max_params=MAX_PARAMS) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.array(params.values if hasattr(params, "values") else params, dtype=np.float64)
    _cap(theta.size, max_params=max_params)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + step
        up = lossfn(theta.copy())
        theta[i] = old - step
        down = lossfn(theta.copy())
        theta[i] = old
        grad[i] = (up - down) / (2 * step)
    return grad


def finite_diff_jacobian(fn, params, step=1e-5, max_params=MAX_PARAMS) -> np.ndarray:
    """Central-difference Jacobian of a vector function; columns per parameter."""
    theta = np.array(params.values if hasattr(params, "values") else params, dtype=np.float64)
    _cap(theta.size, max_params=max_params)
    cols = []
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + step
        up = np.ravel(fn(theta.copy()))
        theta[i] = old - step
        down = np.ravel(fn(theta.copy()))
        theta[i] = old
        cols.append((up - down) / (2 * step))
    return np.stack(cols, axis=1)
