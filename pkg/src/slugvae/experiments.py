"""Desk-scale analyses: score/error correlation, subgroup bias, rejection
curves and artifact localization, plus deterministic report emission."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import curvature, data, uq, vae
from .errors import ConfigurationError, SlugError
from .rng import stream

SAMPLE_HEADER = ["sample", "slug", "encoder_variance", "mse", "subgroup"]
CORRELATION_HEADER = ["score", "pearson", "spearman", "defined"]
GRID_HEADER = ["mix", "subgroup", "metric", "seed", "value", "status"]
REJECTION_HEADER = ["fraction", "retained", "mean_mse"]
OOD_HEADER = ["image", "kind", "mask_fraction", "uq_inside", "uq_outside", "uq_contrast",
              "mse_inside", "mse_outside", "mse_contrast", "clamp_fraction"]
OOD_SUMMARY_HEADER = ["statistic", "uq", "mse"]


@dataclass
class ExperimentResult:
    experiment: str
    config: dict
    samples: list  # rows matching sample_header
    summary: list  # rows matching summary_header
    sample_header: list
    summary_header: list
    stats: dict = field(default_factory=dict)
    maps: dict = field(default_factory=dict)  # name -> 2-D array in [0, 1]
    paths: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Scoring helpers
# ---------------------------------------------------------------------------


@dataclass
class Correlation:
    pearson: float
    spearman: float
    defined: bool


def correlation(a, b) -> Correlation:
    """Pearson and Spearman correlation; undefined if either column is constant."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigurationError("correlation needs two equal-length vectors")
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return Correlation(math.nan, math.nan, False)
    return Correlation(float(stats.pearsonr(a, b)[0]), float(stats.spearmanr(a, b)[0]), True)


@dataclass
class ScoreTable:
    ids: list
    subgroups: list
    mse: np.ndarray
    slug: np.ndarray
    encoder_variance: np.ndarray

    def rows(self):
        return [[i, s, e, m, g] for i, s, e, m, g in
                zip(self.ids, self.slug, self.encoder_variance, self.mse, self.subgroups)]


def score_dataset(model, basis, dataset: data.Dataset, probes: uq.ProbeConfig, prior_precision=None) -> ScoreTable:
    ids = [Path(r.path).stem for r in dataset.records]
    return ScoreTable(
        ids,
        dataset.labels,
        data.mse_per_sample(model, dataset),
        uq.slug_scores(dataset.images, model, basis, probes, prior_precision=prior_precision),
        np.atleast_1d(uq.encoder_variance_score(model, dataset.images)),
    )


def correlation_experiment(model, basis, testset: data.Dataset, probes: uq.ProbeConfig, config=None,
                           table: ScoreTable | None = None) -> ExperimentResult:
    """Correlation of per-sample MSE with SLUG and with the encoder variance."""
    if len(testset) < 10:
        raise ConfigurationError(f"correlation needs at least 10 scored inputs, got {len(testset)}")
    table = table or score_dataset(model, basis, testset, probes)
    summary = []
    found = {}
    for name, col in (("slug", table.slug), ("encoder_variance", table.encoder_variance)):
        c = correlation(table.mse, col)
        found[name] = c
        summary.append([name, c.pearson, c.spearman, c.defined])
    return ExperimentResult("correlation", dict(config or {}), table.rows(), summary, SAMPLE_HEADER,
                            CORRELATION_HEADER, stats={"correlations": found, "table": table})


# ---------------------------------------------------------------------------
# Subgroup grid
# ---------------------------------------------------------------------------


@dataclass
class PipelineSettings:
    """Everything one (mix, seed) cell needs besides the mix and seed."""

    image_size: int = 32
    channels: int = 3
    n_train: int = 600
    n_test: int = 128
    subgroups: tuple = data.DEFAULT_SUBGROUPS
    width: int = 8
    latent_dim: int = 16
    stages: int = 2
    train: vae.TrainConfig = field(default_factory=vae.TrainConfig)
    k: int = 30
    k_keep: int = 30
    mode: str = "exact"
    subset: str = "decoder"
    sketch_dim: int | None = None
    n_curvature: int = 0  # 0 = whole training set
    probes: uq.ProbeConfig = field(default_factory=uq.ProbeConfig)
    prior_precision: float | None = None
    latent_sample: bool = False  # ablation: score at mu + sigma * eps

    @property
    def image_shape(self):
        return (self.image_size, self.image_size, self.channels)


@dataclass
class CellResult:
    mix: float
    seed: int
    status: str
    model: vae.VAEModel | None = None
    basis: curvature.UncertaintyBasis | None = None
    dataset: data.Dataset | None = None
    table: ScoreTable | None = None
    history: vae.LossHistory | None = None


def generate_cell_data(mix, seed, s: PipelineSettings) -> data.Dataset:
    return data.generate_dataset(s.subgroups, mix, (s.n_train, s.n_test), seed, s.image_shape)


def curvature_subset(train_images, n_curvature, seed):
    """Whole set, or a seeded subsample of ``n_curvature`` inputs in index order."""
    n = train_images.shape[0]
    if not n_curvature or n_curvature >= n:
        return train_images
    idx = np.sort(stream(seed, "curvature-subset").choice(n, size=n_curvature, replace=False))
    return train_images[idx]


def train_cell(dataset: data.Dataset, seed, s: PipelineSettings):
    model = vae.build_model(s.image_shape, s.width, s.latent_dim, s.stages, seed=seed)
    pnet = vae.default_perceptual(s.image_shape) if s.train.perceptual else None
    return vae.train(model, pnet, dataset.split("train").images, s.train, seed=seed)


def fit_cell_basis(model, dataset: data.Dataset, seed, s: PipelineSettings):
    cdata = curvature_subset(dataset.split("train").images, s.n_curvature, seed)
    return curvature.fit_basis(model, cdata, s.k, s.k_keep, seed, s.mode, s.subset, s.sketch_dim)


def run_cell(mix, seed, s: PipelineSettings, data_seed=None) -> CellResult:
    """Generate, train, fit the basis and score the test split for one cell.

    The dataset is drawn with ``data_seed`` (default: ``seed``).
    """
    try:
        ds = generate_cell_data(mix, seed if data_seed is None else data_seed, s)
        model, hist = train_cell(ds, seed, s)
        if s.latent_sample:
            model = vae.with_latent_sample(model, seed)
        basis = fit_cell_basis(model, ds, seed, s)
        table = score_dataset(model, basis, ds.split("test"), s.probes, s.prior_precision)
    except SlugError as exc:
        return CellResult(mix, seed, f"failed: {exc}")
    return CellResult(mix, seed, "ok", model, basis, ds, table, hist)


def subgroup_rows(cells, labels) -> list:
    """Long-form rows (mix, subgroup, metric, seed, value, status)."""
    rows = []
    for cell in cells:
        if cell.table is None:
            for g in labels:
                for metric in ("mse", "slug", "encoder_variance"):
                    rows.append([cell.mix, g, metric, cell.seed, math.nan, cell.status])
            continue
        groups = np.array(cell.table.subgroups)
        for g in dict.fromkeys(cell.table.subgroups):
            sel = groups == g
            for metric in ("mse", "slug", "encoder_variance"):
                value = float(np.mean(getattr(cell.table, metric)[sel]))
                rows.append([cell.mix, g, metric, cell.seed, value, cell.status])
    return rows


def subgroup_experiment(mixes=(1.0, 0.5, 0.0), seeds=(0, 1, 2), settings: PipelineSettings | None = None,
                        config=None, progress=None) -> ExperimentResult:
    """Train and score every (mix, seed) cell; failing cells are recorded and skipped."""
    s = settings or PipelineSettings()
    for m in mixes:
        if not 0.0 <= float(m) <= 1.0:
            raise ConfigurationError(f"mix ratio {m} outside [0, 1]")
    cells = []
    for mix in mixes:
        for seed in seeds:
            cell = run_cell(float(mix), int(seed), s)
            cells.append(cell)
            if progress is not None:
                progress(cell)
    samples = []
    for cell in cells:
        if cell.table is not None:
            samples += [[cell.mix, cell.seed] + row for row in cell.table.rows()]
    return ExperimentResult("subgroup", dict(config or {}), samples, subgroup_rows(cells, [g.label for g in s.subgroups]),
                            ["mix", "seed"] + SAMPLE_HEADER, GRID_HEADER, stats={"cells": cells})


def grid_means(rows, mix, metric):
    """``{subgroup: mean over seeds}`` from long-form grid rows."""
    acc = {}
    for r_mix, g, r_metric, _, value, status in rows:
        if r_mix == mix and r_metric == metric and status == "ok":
            acc.setdefault(g, []).append(value)
    return {g: float(np.mean(v)) for g, v in acc.items()}


# ---------------------------------------------------------------------------
# Rejection
# ---------------------------------------------------------------------------


def rejection_curve(scores, mses, fractions=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5)):
    """Mean MSE of the samples kept after removing the highest-scoring fraction.

    Returns rows ``(fraction, retained_count, mean_mse)``. Samples are ordered
    by descending score with ties kept in input order; ``round(q * n)``
    samples are removed, never all of them.
    """
    scores, mses = np.asarray(scores, dtype=np.float64), np.asarray(mses, dtype=np.float64)
    if scores.shape != mses.shape or scores.ndim != 1:
        raise ConfigurationError("scores and MSEs must be equal-length vectors")
    n = scores.size
    order = np.argsort(-scores, kind="stable")
    rows = []
    for q in fractions:
        if not 0.0 <= q <= 1.0:
            raise ConfigurationError(f"rejection fraction {q} outside [0, 1]")
        removed = min(int(math.floor(q * n + 0.5)), n - 1)
        kept = order[removed:]
        rows.append([float(q), int(kept.size), float(mses[kept].mean())])
    return rows


def rejection_experiment(table: ScoreTable, fractions, config=None) -> ExperimentResult:
    curves = {"slug": rejection_curve(table.slug, table.mse, fractions),
              "encoder_variance": rejection_curve(table.encoder_variance, table.mse, fractions),
              "mse": rejection_curve(table.mse, table.mse, fractions)}
    summary = [[name] + row for name, curve in curves.items() for row in curve]
    return ExperimentResult("rejection", dict(config or {}), table.rows(), summary, SAMPLE_HEADER,
                            ["score"] + REJECTION_HEADER, stats={"curves": curves, "table": table})


# ---------------------------------------------------------------------------
# Artifact localization
# ---------------------------------------------------------------------------


def region_contrast(values, mask):
    """``mean(inside) / mean(outside)`` of a normalized map.

    A mask covering every pixel gives 1 by definition; an all-zero map or a
    zero outside mean gives ``nan`` (undefined).
    """
    v = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ConfigurationError("empty artifact mask")
    if mask.all():
        return 1.0, float(v.mean()), float(v.mean())
    inside, outside = float(v[mask].mean()), float(v[~mask].mean())
    if not np.any(v) or outside == 0.0:
        return math.nan, inside, outside
    return inside / outside, inside, outside


def mse_map(model, x):
    """Channel-summed squared reconstruction error per pixel."""
    return np.sum((x - vae.reconstruct(model, x)) ** 2, axis=-1)


def ood_images(clean, kinds, count, seed):
    """Inject artifacts into ``count`` images, cycling through images and kinds."""
    out = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        img, spec = data.realize_artifact(clean[i % len(clean)], data.ArtifactSpec(kind),
                                          int(stream(seed, "ood", i).integers(2**62)))
        out.append((kind, img, spec.mask))
    return out


def ood_map_experiment(model, basis, clean_images, kinds=data.ARTIFACT_KINDS, probes: uq.ProbeConfig | None = None,
                       count=32, seed=0, config=None, prior_precision=None) -> ExperimentResult:
    """Inside/outside contrast of normalized uncertainty and error maps."""
    if probes is None:
        probes = uq.ProbeConfig(500, "rademacher", seed)
    clean = np.asarray(clean_images, dtype=np.float64)
    rows, maps = [], {}
    uq_c, mse_c = [], []
    for i, (kind, img, mask) in enumerate(ood_images(clean, list(kinds), count, seed)):
        pm = uq.pixel_map(img, model, basis, probes, prior_precision=prior_precision)
        u = uq.normalize_map(pm.values)
        e = uq.normalize_map(mse_map(model, img))
        cu, ui, uo = region_contrast(u, mask)
        ce, ei, eo = region_contrast(e, mask)
        uq_c.append(cu)
        mse_c.append(ce)
        rows.append([i, kind, float(mask.mean()), ui, uo, cu, ei, eo, ce, pm.clamp_fraction])
        maps[f"{i:03d}_{kind}_uq"] = u
        maps[f"{i:03d}_{kind}_mse"] = e
        maps[f"{i:03d}_{kind}_mask"] = mask.astype(np.float64)
    med_u, med_e = float(np.nanmedian(uq_c)), float(np.nanmedian(mse_c))
    summary = [["median_contrast", med_u, med_e],
               ["undefined_count", int(np.isnan(uq_c).sum()), int(np.isnan(mse_c).sum())]]
    return ExperimentResult("ood", dict(config or {}), rows, summary, OOD_HEADER, OOD_SUMMARY_HEADER,
                            stats={"uq_median": med_u, "mse_median": med_e}, maps=maps)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def config_hash(config) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def emit_report(result: ExperimentResult, root, run_id=None) -> Path:
    """Write ``root/<experiment>/<run_id>/`` and return that directory.

    The run id defaults to the leading digits of the config hash, so reruns
    of one configuration overwrite the same directory. Any previous contents
    are removed first so the manifest always lists exactly the files present.
    """
    chash = config_hash(result.config)
    run_id = run_id or chash[:12]
    out = Path(root) / result.experiment / run_id
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    write_csv(out / "summary.csv", result.summary_header, result.summary)
    write_csv(out / "samples.csv", result.sample_header, result.samples)
    (out / "config.json").write_text(json.dumps(result.config, sort_keys=True, indent=1, default=str) + "\n")
    if result.maps:
        (out / "maps").mkdir()
        for name, m in sorted(result.maps.items()):
            data.write_ppm(out / "maps" / f"{name}.pgm", m[:, :, None])
            data.write_pgm16(out / "maps" / f"{name}_16.pgm", m)
            data.write_raw(out / "maps" / f"{name}.raw", m)
    files = sorted(p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file())
    lines = [f"experiment {result.experiment}", f"config_hash {chash}",
             f"seed {result.config.get('seed', 'none')}"]
    lines += [f"{file_hash(out / f)}  {f}" for f in files]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    result.paths = [out / f for f in files] + [out / "manifest.txt"]
    return out


def read_manifest_hashes(run_dir) -> dict:
    """``{relative path: sha256}`` from a run manifest."""
    hashes = {}
    for line in (Path(run_dir) / "manifest.txt").read_text().splitlines():
        if "  " in line:
            digest, name = line.split("  ", 1)
            hashes[name] = digest
    return hashes
