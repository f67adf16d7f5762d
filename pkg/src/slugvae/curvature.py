"""Matrix-free Gauss-Newton curvature and its leading eigenbasis.

The GGN of the reconstruction map with an identity output Hessian is
``G = sum_i J_i^T J_i``; :class:`GGNOperator` applies it without forming it.
:func:`lanczos` tridiagonalizes any symmetric operator, either keeping the
full orthonormal Krylov basis (``"exact"``) or only its sketch
(``"sketched"``, two live parameter-sized vectors), and :func:`build_basis`
turns the result into an :class:`UncertaintyBasis`.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, LoadError, NumericError
from .rng import rademacher, stream
from .vae import ReconstructionMap, VAEModel, subset_size

BASIS_MAGIC = b"SLUGBASE"
BASIS_VERSION = 1
MODES = ("exact", "sketched")
_SUBSET_CODES = {"decoder": 0, "all": 1, "none": 255}
BREAKDOWN_TOL = 1e-12


class MatrixOperator:
    """Dense symmetric matrix wrapped as an operator (for tests and stubs)."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.dim = self.matrix.shape[0]

    def matvec(self, v):
        return self.matrix @ v


class GGNOperator:
    """``v -> sum_i J_i^T (J_i v)`` over a curvature dataset, in fixed order."""

    def __init__(self, model: VAEModel, data, subset="decoder", batch_size=64, cache=False):
        self.model = model
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ConfigurationError("curvature data must be a (n, H, W, C) array")
        self.subset = subset
        self.dim = subset_size(model, subset)
        self.batch_size = int(batch_size)
        self._maps = None
        if cache:
            self._maps = list(self._iter_maps())

    @property
    def n(self):
        return self.data.shape[0]

    def _map(self, start):
        batch = self.data[start : start + self.batch_size]
        try:
            return ReconstructionMap(self.model, batch, self.subset)
        except NumericError:
            for i in range(batch.shape[0]):
                try:
                    ReconstructionMap(self.model, batch[i : i + 1], self.subset)
                except NumericError as exc:
                    raise NumericError(f"non-finite GGN contribution from sample {start + i}: {exc}") from exc
            raise

    def _iter_maps(self):
        for start in range(0, self.n, self.batch_size):
            yield start, self._map(start)

    def matvec(self, v):
        v = np.asarray(v.values if hasattr(v, "values") else v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ConfigurationError(f"vector of length {v.shape} does not match subset size {self.dim}")
        out = np.zeros(self.dim)
        for start, rm in self._maps if self._maps is not None else self._iter_maps():
            contrib = rm.vjp(rm.jvp(v))
            if not np.all(np.isfinite(contrib)):
                per = rm.vjp(rm.jvp(np.broadcast_to(v, (rm.batch_size, self.dim))), per_example=True)
                bad = int(np.flatnonzero(~np.all(np.isfinite(per), axis=1))[0])
                raise NumericError(f"non-finite GGN contribution from sample {start + bad}")
            out += contrib
        return out


def ggn_vec(op: GGNOperator, v) -> np.ndarray:
    """``G v`` accumulated in dataset order."""
    return op.matvec(v)


# ---------------------------------------------------------------------------
# Sketching
# ---------------------------------------------------------------------------


def default_sketch_dim(k, p):
    """``ceil(4 k ln p)``, at least ``k``."""
    return max(int(k), int(math.ceil(4 * k * math.log(max(p, 2)))))


class SketchOperator:
    """Implicit ``s x p`` Rademacher matrix with entries ``+-1/sqrt(s)``.

    Columns are generated block by block from the seed; the full matrix is
    never held in memory unless ``materialize`` is called.
    """

    def __init__(self, s, p, seed, block=4096):
        if s < 1 or p < 1:
            raise ConfigurationError(f"sketch needs s >= 1 and p >= 1, got s={s}, p={p}")
        self.s, self.p, self.seed, self.block = int(s), int(p), int(seed), int(block)

    def _block(self, j):
        lo = j * self.block
        width = min(self.block, self.p - lo)
        return rademacher(stream(self.seed, "sketch", j), (self.s, width)) / math.sqrt(self.s)

    def _blocks(self):
        for j in range(math.ceil(self.p / self.block)):
            lo = j * self.block
            yield slice(lo, min(lo + self.block, self.p)), self._block(j)

    def apply(self, v):
        """``S v`` for a vector (p,) or matrix (p, m)."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.p:
            raise ConfigurationError(f"sketch expects {self.p} rows, got {v.shape[0]}")
        out = np.zeros((self.s,) + v.shape[1:])
        for sl, blk in self._blocks():
            out += blk @ v[sl]
        return out

    def apply_transpose(self, y):
        """``S^T y`` for a vector (s,) or matrix (s, m)."""
        y = np.asarray(y, dtype=np.float64)
        out = np.empty((self.p,) + y.shape[1:])
        for sl, blk in self._blocks():
            out[sl] = blk.T @ y
        return out

    def materialize(self):
        return np.concatenate([blk for _, blk in self._blocks()], axis=1)


def sketch_apply(sk: SketchOperator, v):
    return sk.apply(v)


# ---------------------------------------------------------------------------
# Lanczos
# ---------------------------------------------------------------------------


@dataclass
class LanczosState:
    alphas: np.ndarray
    betas: np.ndarray  # couplings between consecutive Lanczos vectors, length steps-1
    basis: np.ndarray  # (p, steps) Lanczos vectors or (s, steps) sketched ones
    mode: str
    terminated: bool = False
    last_beta: float = 0.0  # residual norm after the final step
    sketch: SketchOperator | None = None
    residuals: list = field(default_factory=list)

    @property
    def steps(self):
        return len(self.alphas)


def lanczos(op, k, seed, mode="exact", sketch: SketchOperator | None = None, track_residuals=False, start=None):
    """Run up to ``k`` Lanczos steps on the symmetric operator ``op``.

    ``op`` needs ``dim`` and ``matvec``. Exact mode re-orthogonalizes
    against all previous vectors (twice) and stores them; sketched mode uses
    the plain three-term recurrence and stores only ``sketch.apply(q_j)``.
    A residual norm below ``1e-12 * max(1, |T|)`` ends the run early and
    sets ``terminated``. ``start`` overrides the seeded start vector.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown Lanczos mode {mode!r}; expected one of {MODES}")
    p = int(op.dim)
    if not 1 <= k <= p:
        raise ConfigurationError(f"need 1 <= k <= p, got k={k}, p={p}")
    if mode == "sketched":
        if sketch is None:
            raise ConfigurationError("sketched Lanczos needs a SketchOperator")
        if sketch.p != p:
            raise ConfigurationError(f"sketch width {sketch.p} != operator dimension {p}")

    if start is None:
        q = stream(seed, "lanczos-start").standard_normal(p)
    else:
        q = np.array(start, dtype=np.float64).reshape(-1)
        if q.size != p or not np.linalg.norm(q) > 0:
            raise ConfigurationError(f"start vector must be a non-zero vector of length {p}")
    q /= np.linalg.norm(q)
    alphas, betas, residuals = [], [], []
    stored = []
    q_prev = np.zeros(p)
    beta_prev = 0.0
    scale = 0.0
    terminated = False
    beta = 0.0
    Q = np.zeros((p, k)) if mode == "exact" else None
    for j in range(k):
        if mode == "exact":
            Q[:, j] = q
        else:
            stored.append(sketch.apply(q))
        w = op.matvec(q)
        if not np.all(np.isfinite(w)):
            raise NumericError(f"operator returned non-finite values at Lanczos step {j}")
        alpha = float(q @ w)
        w = w - alpha * q - beta_prev * q_prev
        if mode == "exact":
            for _ in range(2):
                w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        beta = float(np.linalg.norm(w))
        alphas.append(alpha)
        scale = max(scale, abs(alpha), beta_prev)
        if track_residuals:
            residuals.append(beta)
        if j == k - 1:
            break
        if beta <= BREAKDOWN_TOL * max(1.0, scale):
            terminated = True
            break
        betas.append(beta)
        q_prev, q, beta_prev = q, w / beta, beta
    steps = len(alphas)
    basis = Q[:, :steps] if mode == "exact" else np.stack(stored, axis=1)
    return LanczosState(
        np.array(alphas), np.array(betas), basis, mode, terminated, beta,
        sketch if mode == "sketched" else None, residuals,
    )


# ---------------------------------------------------------------------------
# Uncertainty basis
# ---------------------------------------------------------------------------


@dataclass
class UncertaintyBasis:
    """Orthonormal columns spanning the leading GGN eigendirections.

    ``columns`` is ``(p, k)`` in exact mode and ``(s, k)`` in sketched mode,
    where it lives in the sketch space of ``SketchOperator(s, p, sketch_seed)``.
    """

    mode: str
    columns: np.ndarray
    ritz_values: np.ndarray
    param_dim: int
    sketch_seed: int = 0
    subset: str = "decoder"
    n_curvature: int = 0
    truncated: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown basis mode {self.mode!r}")
        self.columns = np.asarray(self.columns, dtype=np.float64)
        self.ritz_values = np.asarray(self.ritz_values, dtype=np.float64)
        if self.columns.ndim != 2 or self.columns.shape[1] != self.ritz_values.size:
            raise ConfigurationError("basis columns and Ritz values disagree on the rank")
        if self.mode == "exact" and self.columns.shape[0] != self.param_dim:
            raise ConfigurationError("exact basis rows must equal the parameter dimension")

    @property
    def rank(self):
        return self.columns.shape[1]

    @property
    def sketch_dim(self):
        return self.columns.shape[0] if self.mode == "sketched" else 0

    @property
    def sketch(self) -> SketchOperator | None:
        if self.mode != "sketched":
            return None
        return SketchOperator(self.sketch_dim, self.param_dim, self.sketch_seed)

    def truncate(self, k) -> UncertaintyBasis:
        """Leading ``k`` columns (nested bases share their leading columns)."""
        return UncertaintyBasis(self.mode, self.columns[:, :k], self.ritz_values[:k], self.param_dim,
                                self.sketch_seed, self.subset, self.n_curvature, self.truncated)

    def orthonormality_error(self):
        k = self.rank
        return float(np.max(np.abs(self.columns.T @ self.columns - np.eye(k)))) if k else 0.0


def tridiagonal_eigh(alphas, betas):
    """Eigenpairs of the Lanczos tridiagonal, sorted by descending eigenvalue."""
    t = np.diag(alphas)
    if len(betas):
        t += np.diag(betas, 1) + np.diag(betas, -1)
    vals, vecs = np.linalg.eigh(t)
    order = np.argsort(-vals, kind="stable")
    return vals[order], vecs[:, order]


def build_basis(state: LanczosState, k_keep, subset="decoder", n_curvature=0) -> UncertaintyBasis:
    """Top ``k_keep`` Ritz directions of a Lanczos run.

    If the run produced fewer than ``k_keep`` steps, the basis is returned
    with fewer columns, ``truncated=True`` and a warning.
    """
    if k_keep < 0:
        raise ConfigurationError("k_keep must be >= 0")
    p = state.basis.shape[0] if state.mode == "exact" else state.sketch.p
    seed = state.sketch.seed if state.sketch is not None else 0
    truncated = False
    if k_keep > state.steps:
        warnings.warn(f"only {state.steps} Lanczos steps available; basis truncated from {k_keep}")
        k_keep, truncated = state.steps, True
    if k_keep == 0:
        rows = p if state.mode == "exact" else state.basis.shape[0]
        return UncertaintyBasis(state.mode, np.zeros((rows, 0)), np.zeros(0), p, seed, subset, n_curvature, truncated)
    vals, vecs = tridiagonal_eigh(state.alphas, state.betas)
    vals, vecs = vals[:k_keep], vecs[:, :k_keep]
    ritz = state.basis @ vecs
    if state.mode == "sketched":
        # the sketched Ritz vectors are only nearly orthonormal; QR fixes the span
        ritz, r = np.linalg.qr(ritz)
        ritz = ritz * np.where(np.diag(r) < 0, -1.0, 1.0)
    return UncertaintyBasis(state.mode, ritz, vals, p, seed, subset, n_curvature, truncated)


def fit_basis(model, data, k, k_keep, seed=0, mode="exact", subset="decoder", sketch_dim=None,
              batch_size=64, cache=False) -> UncertaintyBasis:
    """GGN over ``data``, ``k`` Lanczos steps, keep the top ``k_keep`` directions."""
    op = GGNOperator(model, data, subset, batch_size=batch_size, cache=cache)
    sketch = None
    if mode == "sketched":
        s = sketch_dim or default_sketch_dim(k_keep, op.dim)
        sketch = SketchOperator(s, op.dim, stream(seed, "sketch-seed").integers(2**62))
    state = lanczos(op, min(k, op.dim), seed, mode, sketch)
    return build_basis(state, k_keep, subset, op.n)


def save_basis(path, basis: UncertaintyBasis) -> None:
    header = BASIS_MAGIC + struct.pack(
        "<IBBQQQQQB",
        BASIS_VERSION,
        MODES.index(basis.mode),
        _SUBSET_CODES[basis.subset],
        basis.columns.shape[0],
        basis.rank,
        basis.param_dim,
        basis.sketch_seed,
        basis.n_curvature,
        int(basis.truncated),
    )
    body = basis.ritz_values.astype("<f8").tobytes() + np.asfortranarray(basis.columns).astype("<f8").tobytes(order="F")
    Path(path).write_bytes(header + body)


_HEADER = struct.Struct("<IBBQQQQQB")


def load_basis(path) -> UncertaintyBasis:
    raw = Path(path).read_bytes()
    if raw[:8] != BASIS_MAGIC:
        raise LoadError(f"{path}: bad magic bytes, not a basis file")
    if len(raw) < 8 + _HEADER.size:
        raise LoadError(f"{path}: truncated header")
    version, mode, subset, rows, k, p, seed, n_curv, trunc = _HEADER.unpack_from(raw, 8)
    if version != BASIS_VERSION:
        raise LoadError(f"{path}: unsupported basis version {version}")
    if mode >= len(MODES):
        raise LoadError(f"{path}: unknown mode byte {mode}")
    codes = {v: k_ for k_, v in _SUBSET_CODES.items()}
    if subset not in codes:
        raise LoadError(f"{path}: unknown subset code {subset}")
    off = 8 + _HEADER.size
    if len(raw) != off + 8 * (k + rows * k):
        raise LoadError(f"{path}: size does not match {rows}x{k} columns")
    ritz = np.frombuffer(raw, dtype="<f8", count=k, offset=off).astype(np.float64)
    cols = np.frombuffer(raw, dtype="<f8", count=rows * k, offset=off + 8 * k).reshape((rows, k), order="F")
    try:
        return UncertaintyBasis(MODES[mode], np.ascontiguousarray(cols, dtype=np.float64), ritz, int(p),
                                int(seed), codes[subset], int(n_curv), bool(trunc))
    except ConfigurationError as exc:
        raise LoadError(f"{path}: {exc}") from exc
