"""Per-output, per-image and per-pixel epistemic uncertainty.

For an input ``x`` with reconstruction Jacobian ``J`` (w.r.t. the basis'
parameter subset) and projector ``P = I - U U^T``:

* :func:`slu_output` is ``e_j^T J P J^T e_j`` for one output coordinate,
* :func:`slug_score` estimates ``Tr(J P J^T)`` with random probes,
* :func:`pixel_map` estimates ``diag(J P J^T)`` with Rademacher probes.

Every quadratic form is evaluated as the squared norm of a projected
vector-Jacobian product, so exact-mode estimates are never negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curvature import UncertaintyBasis
from .errors import ConfigurationError
from .rng import rademacher, stream
from .vae import ReconstructionMap, VAEModel, encode, subset_size

DISTRIBUTIONS = ("gaussian", "rademacher")


@dataclass(frozen=True)
class ProbeConfig:
    count: int = 500
    distribution: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigurationError("probe count must be >= 1")
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigurationError(f"unknown probe distribution {self.distribution!r}; expected {DISTRIBUTIONS}")

    def probe(self, index, shape):
        rng = stream(self.seed, "probe", self.distribution, index)
        if self.distribution == "gaussian":
            return rng.standard_normal(shape)
        return rademacher(rng, tuple(shape))

    def batch(self, start, stop, shape):
        return np.stack([self.probe(i, shape) for i in range(start, stop)])


@dataclass
class PixelUncertaintyMap:
    values: np.ndarray  # (H, W) channel-summed, clamped at zero
    raw: np.ndarray  # (H, W, C) unclamped estimate
    clamp_fraction: float


def _check(model, basis):
    if basis.param_dim != subset_size(model, basis.subset):
        raise ConfigurationError(
            f"basis built for {basis.param_dim} parameters ({basis.subset}), model subset has "
            f"{subset_size(model, basis.subset)}"
        )


def _weights(basis, prior_precision):
    if prior_precision is None:
        return None
    lam = np.maximum(basis.ritz_values, 0.0)
    return lam / (lam + prior_precision)


def residual_energy(basis: UncertaintyBasis, vectors, prior_precision=None):
    """``v^T P v`` for each row ``v`` of ``vectors`` (shape (m, p)).

    With ``prior_precision`` the projector becomes ``I - U diag(l/(l+a)) U^T``.
    """
    V = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    w = _weights(basis, prior_precision)
    if basis.mode == "sketched":
        V = basis.sketch.apply(V.T).T
    if basis.rank == 0:
        return np.einsum("ij,ij->i", V, V)
    C = V @ basis.columns
    if w is None:
        R = V - C @ basis.columns.T
        return np.einsum("ij,ij->i", R, R)
    return np.einsum("ij,ij->i", V, V) - (C**2) @ w


def project(basis: UncertaintyBasis, vectors, prior_precision=None):
    """Apply the (sketched) projector ``P`` to each row of ``vectors``."""
    V = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    w = _weights(basis, prior_precision)
    U = basis.columns
    if basis.mode == "sketched":
        sk = basis.sketch
        W = sk.apply(V.T)
        if basis.rank:
            C = U.T @ W
            W = W - U @ (C if w is None else w[:, None] * C)
        return sk.apply_transpose(W).T
    if basis.rank == 0:
        return V.copy()
    C = V @ U
    return V - (C if w is None else C * w) @ U.T


def _one_hot(indices, shape):
    e = np.zeros((len(indices), int(np.prod(shape))))
    e[np.arange(len(indices)), indices] = 1.0
    return e.reshape((len(indices),) + tuple(shape))


def _repeat(x, m):
    return np.broadcast_to(x, (m,) + x.shape)


def slu_output(x, model: VAEModel, basis: UncertaintyBasis, j, prior_precision=None) -> float:
    """Predictive variance of output coordinate ``j`` (flat index)."""
    _check(model, basis)
    x = np.asarray(x, dtype=np.float64)
    rm = ReconstructionMap(model, x[None], basis.subset)
    v = rm.vjp(_one_hot([j], rm.output.shape[1:]))
    return float(max(residual_energy(basis, v, prior_precision)[0], 0.0))


def slu_all_outputs(x, model, basis, chunk=64, prior_precision=None) -> np.ndarray:
    """Exact per-output variances ``diag(J P J^T)`` by one-hot enumeration."""
    _check(model, basis)
    x = np.asarray(x, dtype=np.float64)
    out_shape = model.image_shape
    n_out = int(np.prod(out_shape))
    rm = ReconstructionMap(model, _repeat(x, min(chunk, n_out)), basis.subset)
    values = np.empty(n_out)
    for start in range(0, n_out, chunk):
        idx = np.arange(start, min(start + chunk, n_out))
        if idx.size != rm.batch_size:
            rm = ReconstructionMap(model, _repeat(x, idx.size), basis.subset)
        V = rm.vjp(_one_hot(idx, out_shape), per_example=True)
        values[idx] = residual_energy(basis, V, prior_precision)
    return values.reshape(out_shape)


def slug_exhaustive(x, model, basis, chunk=64, prior_precision=None) -> float:
    """``Tr(J P J^T)`` as the sum over all one-hot outputs."""
    return float(slu_all_outputs(x, model, basis, chunk, prior_precision).sum())


def probe_terms(x, model, basis, probes: ProbeConfig, chunk=64, prior_precision=None) -> np.ndarray:
    """Per-probe quadratic forms ``e_s^T J P J^T e_s``."""
    _check(model, basis)
    x = np.asarray(x, dtype=np.float64)
    out_shape = model.image_shape
    terms = np.empty(probes.count)
    rm = None
    for start in range(0, probes.count, chunk):
        stop = min(start + chunk, probes.count)
        if rm is None or rm.batch_size != stop - start:
            rm = ReconstructionMap(model, _repeat(x, stop - start), basis.subset)
        V = rm.vjp(probes.batch(start, stop, out_shape), per_example=True)
        terms[start:stop] = residual_energy(basis, V, prior_precision)
    return terms


def slug_score(x, model, basis, probes: ProbeConfig = ProbeConfig(), chunk=64, prior_precision=None) -> float:
    """Hutchinson estimate of ``Tr(J P J^T)``, clamped at zero."""
    return float(max(probe_terms(x, model, basis, probes, chunk, prior_precision).mean(), 0.0))


def slug_scores(images, model, basis, probes: ProbeConfig = ProbeConfig(), chunk=64, prior_precision=None):
    return np.array([slug_score(x, model, basis, probes, chunk, prior_precision) for x in images])


def pixel_map(x, model, basis, probes: ProbeConfig | None = None, chunk=64, prior_precision=None):
    """Diagonal estimate ``mean_s e_s * (J P J^T e_s)``.

    ``probes=None`` enumerates one-hot probes instead, which yields the exact
    diagonal. Random probes must be Rademacher.
    """
    _check(model, basis)
    x = np.asarray(x, dtype=np.float64)
    out_shape = model.image_shape
    n_out = int(np.prod(out_shape))
    if probes is None:
        total = n_out
        make = lambda a, b: _one_hot(np.arange(a, b), out_shape)  # noqa: E731
    else:
        if probes.distribution != "rademacher":
            raise ConfigurationError("pixel maps need Rademacher probes")
        total = probes.count
        make = lambda a, b: probes.batch(a, b, out_shape)  # noqa: E731
    acc = np.zeros(out_shape)
    rm = None
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        if rm is None or rm.batch_size != stop - start:
            rm = ReconstructionMap(model, _repeat(x, stop - start), basis.subset)
        E = make(start, stop)
        PV = project(basis, rm.vjp(E, per_example=True), prior_precision)
        acc += np.sum(E * rm.jvp(PV), axis=0)
    raw = acc / (1.0 if probes is None else probes.count)
    clamped = np.maximum(raw, 0.0)
    return PixelUncertaintyMap(clamped.sum(axis=-1), raw, float(np.mean(raw < 0)))


def normalize_map(values) -> np.ndarray:
    """Affine rescale to [0, 1]; constant maps become all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def encoder_variance_score(model: VAEModel, x):
    """Sum of the encoder's latent variances (per sample for batches)."""
    return np.sum(np.exp(encode(model, x).log_var), axis=-1)
