"""Command-line driver: ``slugvae <subcommand> [--config FILE] [--set section.key=value ...]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import curvature, data, experiments, uq, vae
from .config import RunConfig
from .errors import ConfigurationError, SlugError

EXPERIMENTS = ("correlation", "subgroup", "rejection", "ood")
SCORE_HEADER = experiments.SAMPLE_HEADER


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"{what} {path} does not exist")
    return path


def _manifest_path(cfg, given):
    p = Path(given or cfg["paths"]["data"])
    return p / "manifest.csv" if p.is_dir() or p.suffix != ".csv" else p


def _load_split(cfg, given, split):
    manifest = _require(_manifest_path(cfg, given), "dataset manifest")
    ds = data.load_dataset(manifest, image_size=cfg.image_shape()[:2], split=split)
    if len(ds) == 0:
        raise ConfigurationError(f"{manifest} has no {split} records")
    return ds


def write_run_manifest(path, cfg: RunConfig, seed, files):
    """Config hash, seed, sha256 of every produced file, then the effective config."""
    lines = [f"config_hash {cfg.hash()}", f"seed {seed}"]
    base = Path(path).parent
    for f in sorted(Path(f) for f in files):
        rel = f.relative_to(base).as_posix() if f.is_relative_to(base) else f.as_posix()
        lines.append(f"{experiments.file_hash(f)}  {rel}")
    lines += ["", "# effective config"] + [f"# {line}".rstrip() for line in cfg.to_ini().splitlines()]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg, args):
    out = Path(args.out or cfg["paths"]["data"])
    d = cfg["data"]
    ds = data.generate_dataset(cfg.subgroups(), d["mix_ratio"], (d["n_train"], d["n_test"]), d["seed"],
                               cfg.image_shape())
    manifest = data.save_dataset(ds, out)
    (out / "config.ini").write_text(cfg.to_ini())
    files = [p for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.txt"]
    write_run_manifest(out / "run_manifest.txt", cfg, d["seed"], files)
    _log(f"wrote {len(ds)} images and {manifest}")
    return 0


def cmd_train(cfg, args):
    ds = _load_split(cfg, args.data, "train")
    out = Path(args.out or cfg["paths"]["model"])
    m = cfg["model"]
    model = vae.build_model(cfg.image_shape(), m["width"], m["latent_dim"], m["stages"], seed=cfg["train"]["seed"])
    tc = cfg.train_config()
    pnet = vae.default_perceptual(cfg.image_shape()) if tc.perceptual else None

    def progress(epoch, mean):
        _log(f"epoch {epoch:4d}  loss {mean[3]:.6f}  recon {mean[0]:.6f}  kl {mean[1]:.3f}")

    model, history = vae.train(model, pnet, ds.images, tc, cfg["train"]["seed"], progress=progress)
    vae.save_model(model, out, cfg.snapshot(), history)
    (out / "config.ini").write_text(cfg.to_ini())
    files = [p for p in out.iterdir() if p.is_file() and p.name != "run_manifest.txt"]
    write_run_manifest(out / "run_manifest.txt", cfg, cfg["train"]["seed"], files)
    if len(history):
        _log(f"final/first loss ratio {history.total[-1] / history.total[0]:.4f}")
    return 0


def _load_model(cfg, given):
    return cfg.scoring_model(vae.load_model(_require(given or cfg["paths"]["model"], "model directory")))


def cmd_fit_basis(cfg, args):
    model = _load_model(cfg, args.model)
    ds = _load_split(cfg, args.data, "train")
    c = cfg["curvature"]
    cdata = experiments.curvature_subset(ds.images, c["n_curvature"], c["seed"])
    basis = curvature.fit_basis(model, cdata, c["k"], c["k_keep"], c["seed"], c["mode"], c["subset"],
                                c["sketch_dim"] or None, c["batch_size"])
    out = Path(args.out or cfg["paths"]["basis"])
    out.parent.mkdir(parents=True, exist_ok=True)
    curvature.save_basis(out, basis)
    write_run_manifest(out.with_name(out.name + ".manifest.txt"), cfg, c["seed"], [out])
    _log(f"basis rank {basis.rank} ({basis.mode}, {basis.subset}); top Ritz value "
         f"{basis.ritz_values[0] if basis.rank else float('nan'):.6g}")
    return 0


def _load_basis(cfg, given):
    return curvature.load_basis(_require(given or cfg["paths"]["basis"], "basis file"))


def cmd_score(cfg, args):
    basis = _load_basis(cfg, args.basis)
    model = _load_model(cfg, args.model)
    ds = _load_split(cfg, args.data, args.split)
    table = experiments.score_dataset(model, basis, ds, cfg.probe_config(), cfg.prior_precision())
    out = Path(args.out or cfg["paths"]["scores"])
    out.parent.mkdir(parents=True, exist_ok=True)
    experiments.write_csv(out, SCORE_HEADER, table.rows())
    write_run_manifest(out.with_name(out.name + ".manifest.txt"), cfg, cfg["probes"]["seed"], [out])
    _log(f"scored {len(ds)} images -> {out}")
    return 0


def cmd_map(cfg, args):
    basis = _load_basis(cfg, args.basis)
    model = _load_model(cfg, args.model)
    ds = _load_split(cfg, args.data, args.split)
    out = Path(args.out or cfg["paths"]["maps"])
    out.mkdir(parents=True, exist_ok=True)
    count = min(args.count or cfg["maps"]["images"], len(ds))
    rows, files = [], []
    for i in range(count):
        x = ds.images[i]
        mask = None
        if args.artifact:
            x, mask = data.inject_artifact(x, data.ArtifactSpec(args.artifact), cfg["maps"]["seed"] + i)
        pm = uq.pixel_map(x, model, basis, cfg.map_probes(), prior_precision=cfg.prior_precision())
        norm = uq.normalize_map(pm.values)
        stem = Path(ds.records[i].path).stem
        for path in (out / f"{stem}.pgm", out / f"{stem}_16.pgm", out / f"{stem}.raw"):
            files.append(path)
        data.write_ppm(out / f"{stem}.pgm", norm[:, :, None])
        data.write_pgm16(out / f"{stem}_16.pgm", norm)
        data.write_raw(out / f"{stem}.raw", pm.raw)
        if mask is not None:
            data.write_ppm(out / f"{stem}_mask.pgm", mask[:, :, None].astype(float))
            files.append(out / f"{stem}_mask.pgm")
        rows.append([stem, float(pm.values.sum()), pm.clamp_fraction])
    experiments.write_csv(out / "maps.csv", ["sample", "total", "clamp_fraction"], rows)
    files.append(out / "maps.csv")
    write_run_manifest(out / "manifest.txt", cfg, cfg["maps"]["seed"], files)
    _log(f"wrote {count} maps to {out}")
    return 0


def _results_root(cfg):
    return Path(os.environ.get("SLUG_RESULTS_DIR") or cfg["paths"]["results"])


def _experiment_inputs(cfg, args):
    """Model, basis and test split: from files if given, else trained from the config."""
    snapshot = cfg.snapshot()
    if args.model or args.basis:
        if not (args.model and args.basis):
            raise ConfigurationError("--model and --basis must be given together")
        model, basis = _load_model(cfg, args.model), _load_basis(cfg, args.basis)
        test = _load_split(cfg, args.data, "test")
        snapshot["inputs"] = {
            "model": experiments.file_hash(Path(args.model) / "decoder.params")
            + experiments.file_hash(Path(args.model) / "encoder.params"),
            "basis": experiments.file_hash(args.basis),
            "data": experiments.file_hash(_manifest_path(cfg, args.data)),
        }
        return model, basis, test, None, snapshot
    cell = experiments.run_cell(cfg["data"]["mix_ratio"], cfg["train"]["seed"], cfg.pipeline_settings(),
                                data_seed=cfg["data"]["seed"])
    if cell.status != "ok":
        raise SlugError(cell.status)
    return cell.model, cell.basis, cell.dataset.split("test"), cell.table, snapshot


def cmd_experiment(cfg, args):
    e = cfg["experiment"]
    if args.name == "subgroup":
        snapshot = cfg.snapshot()
        result = experiments.subgroup_experiment(
            e["mixes"], e["seeds"], cfg.pipeline_settings(), snapshot,
            progress=lambda c: _log(f"cell mix={c.mix} seed={c.seed}: {c.status}"),
        )
    else:
        model, basis, test, table, snapshot = _experiment_inputs(cfg, args)
        if args.name == "correlation":
            result = experiments.correlation_experiment(model, basis, test, cfg.probe_config(), snapshot, table)
        elif args.name == "rejection":
            table = table or experiments.score_dataset(model, basis, test, cfg.probe_config(), cfg.prior_precision())
            result = experiments.rejection_experiment(table, e["fractions"], snapshot)
        else:
            result = experiments.ood_map_experiment(
                model, basis, test.images, e["ood_kinds"], cfg.map_probes(), e["ood_images"], e["ood_seed"],
                snapshot, cfg.prior_precision(),
            )
    out = experiments.emit_report(result, _results_root(cfg))
    for row in result.summary[:12]:
        _log("  " + ", ".join(experiments._cell(v) for v in row))
    print(out)
    return 0


def cmd_verify(cfg, args):
    from .verify import run_checks

    checks = run_checks(args.seed)
    for c in checks:
        print(f"{'PASS' if c.ok else 'FAIL'}  {c.name}: {c.detail}")
    return 0 if all(c.ok for c in checks) else 1


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file layered over the built-in defaults")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--latent-sample", action="store_true",
                        help="ablation: linearize at a seeded latent sample instead of the mean "
                             "(same as --set curvature.latent_sample=true)")
    parser = argparse.ArgumentParser(prog="slugvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a VAE on the training split")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-basis", parents=[common], help="build the curvature eigenbasis")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_basis)

    for name, func, help_ in (("score", cmd_score, "per-image uncertainty scores as CSV"),
                              ("map", cmd_map, "per-pixel uncertainty maps")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--model")
        p.add_argument("--basis")
        p.add_argument("--data")
        p.add_argument("--split", default="test", choices=data.SPLITS)
        p.add_argument("--out")
        if name == "map":
            p.add_argument("--count", type=int)
            p.add_argument("--artifact", choices=data.ARTIFACT_KINDS)
        p.set_defaults(func=func)

    p = sub.add_parser("experiment", parents=[common], help="run one analysis and write a report")
    p.add_argument("name", choices=EXPERIMENTS)
    p.add_argument("--model")
    p.add_argument("--basis")
    p.add_argument("--data")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("verify", parents=[common], help="run oracle cross-checks on the tiny fixture")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        overrides = list(args.set) + (["curvature.latent_sample=true"] if args.latent_sample else [])
        cfg = RunConfig.load(args.config, overrides)
        return args.func(cfg, args)
    except ConfigurationError as exc:
        _log(f"configuration error: {exc}")
        return 2
    except SlugError as exc:
        _log(f"error: {exc}")
        return 1
    except np.linalg.LinAlgError as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
