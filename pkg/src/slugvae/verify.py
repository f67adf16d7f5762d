"""Oracle cross-checks on the tiny fixture, as run by ``slugvae verify``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import curvature, oracle, uq
from .fixtures import tiny_model
from .vae import ReconstructionMap


@dataclass
class Check:
    name: str
    ok: bool
    detail: str


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def run_checks(seed=0):
    model, ds = tiny_model(seed)
    xs = ds.split("train").images[:8]
    x = ds.split("test").images[0]
    rng = np.random.default_rng(seed)
    checks = []

    for subset in ("decoder", "all"):
        rm = ReconstructionMap(model, x[None], subset)
        worst = 0.0
        for _ in range(20):
            v = rng.standard_normal(rm.p)
            u = rng.standard_normal(rm.output.shape)
            jv = rm.jvp(v)
            gap = abs(np.sum(jv * u) - rm.vjp(u) @ v) / (np.linalg.norm(jv) * np.linalg.norm(u) + 1)
            worst = max(worst, gap)
        checks.append(Check(f"adjointness[{subset}]", bool(worst <= 1e-10), f"max scaled gap {worst:.2e}"))

    J = oracle.dense_jacobian(model, x)
    v = rng.standard_normal(J.shape[1])
    err = _rel(J @ v, ReconstructionMap(model, x[None]).jvp(v).ravel())
    checks.append(Check("dense jacobian vs jvp", err <= 1e-10, f"relative error {err:.2e}"))

    def out(theta):
        m = model.copy()
        m.decoder_params.values[:] = theta
        return ReconstructionMap(m, x[None]).output

    fd = oracle.finite_diff_jacobian(out, model.decoder_params)
    err = _rel(J, fd)
    checks.append(Check("dense jacobian vs finite differences", err <= 1e-4, f"relative error {err:.2e}"))

    G = oracle.dense_ggn(model, xs)
    op = curvature.GGNOperator(model, xs)
    v = rng.standard_normal(op.dim)
    err = _rel(curvature.ggn_vec(op, v), G @ v)
    checks.append(Check("ggn matvec vs dense", err <= 1e-8, f"relative error {err:.2e}"))

    vals, _ = oracle.dense_eigh(G)
    state = curvature.lanczos(op, 40, seed)
    ritz = curvature.build_basis(state, 5).ritz_values
    err = float(np.max(np.abs(ritz - vals[:5]) / np.abs(vals[:5])))
    checks.append(Check("lanczos top-5 ritz values", err <= 1e-6, f"max relative error {err:.2e}"))

    basis = curvature.build_basis(state, 10)
    trace, _ = oracle.exact_trace_and_diag(model, x, basis)
    exhaustive = uq.slug_exhaustive(x, model, basis)
    err = abs(exhaustive - trace) / max(abs(trace), 1e-300)
    checks.append(Check("exhaustive slug vs dense trace", err <= 1e-10, f"relative error {err:.2e}"))

    full = curvature.UncertaintyBasis("exact", np.eye(op.dim), np.ones(op.dim), op.dim)
    score = uq.slug_score(x, model, full, uq.ProbeConfig(16))
    checks.append(Check("full-rank projector annihilates", score < 1e-8, f"slug {score:.2e}"))
    return checks
