"""Layered run configuration: built-in defaults < INI file < ``section.key=value`` flags."""

from __future__ import annotations

import configparser
import copy
import hashlib
import io
from pathlib import Path

from . import data, uq, vae
from .errors import ConfigurationError

# Every knob, with its type taken from the default value. Lists are comma separated.
DEFAULTS = {
    "data": {
        "seed": 0,
        "image_size": 32,
        "channels": 3,
        "n_train": 600,
        "n_test": 128,
        "mix_ratio": 0.5,
        "light_lo": 0.65,
        "light_hi": 0.85,
        "light_lesion": 0.30,
        "dark_lo": 0.15,
        "dark_hi": 0.35,
        "dark_lesion": 0.12,
    },
    "model": {
        "width": 8,
        "latent_dim": 16,
        "stages": 2,
    },
    "train": {
        "seed": 0,
        "epochs": 30,
        "batch_size": 64,
        "lr": 1e-3,
        "beta": 1e-3,
        "perceptual": True,
    },
    "curvature": {
        "seed": 0,
        "k": 30,
        "k_keep": 30,
        "mode": "exact",
        "subset": "decoder",
        "sketch_dim": 0,  # 0 picks ceil(4 k ln p)
        "n_curvature": 0,  # 0 uses the whole training split
        "batch_size": 64,
        "prior_precision": 0.0,  # 0 keeps the plain projector
        "latent_sample": False,  # ablation: linearize at mu + sigma * eps instead of mu
    },
    "probes": {
        "count": 500,
        "distribution": "gaussian",
        "seed": 0,
    },
    "maps": {
        "count": 500,
        "seed": 0,
        "images": 8,
    },
    "experiment": {
        "mixes": [1.0, 0.5, 0.0],
        "seeds": [0, 1, 2],
        "fractions": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        "ood_images": 32,
        "ood_kinds": ["ruler", "patch", "ink"],
        "ood_seed": 0,
    },
    "paths": {
        "data": "work/data",
        "model": "work/model",
        "basis": "work/basis.slug",
        "scores": "work/scores.csv",
        "maps": "work/maps",
        "results": "results",
    },
}

_CHOICES = {
    ("curvature", "mode"): ("exact", "sketched"),
    ("curvature", "subset"): ("decoder", "all"),
    ("probes", "distribution"): ("gaussian", "rademacher"),
}


def _parse_scalar(text, kind, name):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{name}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigurationError(f"{name}: expected {kind.__name__}, got {text!r}") from None


def _parse(text, default, name):
    if isinstance(default, list):
        kind = type(default[0])
        return [_parse_scalar(t, kind, name) for t in text.split(",") if t.strip()]
    return _parse_scalar(text, type(default), name)


def _format(value):
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Validated ``{section: {key: value}}`` mapping."""

    def __init__(self, values=None):
        self.values = copy.deepcopy(DEFAULTS if values is None else values)

    # -- construction -----------------------------------------------------

    @classmethod
    def load(cls, path=None, overrides=()) -> RunConfig:
        cfg = cls()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigurationError(f"config file {path} does not exist")
            cfg.update_from_ini(path.read_text(), str(path))
        for item in overrides:
            cfg.set_flag(item)
        cfg.validate()
        return cfg

    def update_from_ini(self, text, source="<config>"):
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigurationError(f"{source}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                self.set(section, key, raw)

    def set_flag(self, item):
        """Apply one ``section.key=value`` override."""
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        name, raw = item.split("=", 1)
        section, key = name.strip().split(".", 1)
        self.set(section, key, raw)

    def set(self, section, key, raw):
        name = f"{section}.{key}"
        if section not in DEFAULTS:
            raise ConfigurationError(f"unknown config section {section!r} (in {name})")
        if key not in DEFAULTS[section]:
            raise ConfigurationError(f"unknown config key {name!r}")
        self.values[section][key] = _parse(raw, DEFAULTS[section][key], name) if isinstance(raw, str) else raw

    def validate(self):
        for (section, key), allowed in _CHOICES.items():
            if self.values[section][key] not in allowed:
                raise ConfigurationError(f"{section}.{key} must be one of {allowed}, got {self.values[section][key]!r}")
        positive = [("data", "image_size"), ("data", "channels"), ("data", "n_train"), ("data", "n_test"),
                    ("model", "width"), ("model", "latent_dim"), ("train", "batch_size"), ("curvature", "k"),
                    ("curvature", "batch_size"), ("probes", "count"), ("maps", "count")]
        for section, key in positive:
            if self.values[section][key] < 1:
                raise ConfigurationError(f"{section}.{key} must be >= 1")
        nonneg = [("train", "epochs"), ("curvature", "k_keep"), ("curvature", "sketch_dim"),
                  ("curvature", "n_curvature"), ("curvature", "prior_precision"), ("model", "stages")]
        for section, key in nonneg:
            if self.values[section][key] < 0:
                raise ConfigurationError(f"{section}.{key} must be >= 0")
        if self.values["curvature"]["k_keep"] > self.values["curvature"]["k"]:
            raise ConfigurationError("curvature.k_keep must not exceed curvature.k")
        for m in self.values["experiment"]["mixes"] + [self.values["data"]["mix_ratio"]]:
            if not 0.0 <= m <= 1.0:
                raise ConfigurationError(f"mix ratio {m} outside [0, 1] (data.mix_ratio / experiment.mixes)")
        for kind in self.values["experiment"]["ood_kinds"]:
            if kind not in data.ARTIFACT_KINDS:
                raise ConfigurationError(f"experiment.ood_kinds: unknown artifact {kind!r}")
        for q in self.values["experiment"]["fractions"]:
            if not 0.0 <= q <= 1.0:
                raise ConfigurationError(f"experiment.fractions: {q} outside [0, 1]")
        try:
            self.subgroups()
        except ConfigurationError as exc:
            raise ConfigurationError(f"data: {exc}") from exc
        return self

    # -- access -----------------------------------------------------------

    def __getitem__(self, section):
        return self.values[section]

    def to_ini(self) -> str:
        """Canonical text: sections and keys in declaration order."""
        buf = io.StringIO()
        for section, keys in DEFAULTS.items():
            buf.write(f"[{section}]\n")
            for key in keys:
                buf.write(f"{key} = {_format(self.values[section][key])}\n")
            buf.write("\n")
        return buf.getvalue()

    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()

    def snapshot(self) -> dict:
        return copy.deepcopy(self.values)

    # -- typed views ------------------------------------------------------

    def subgroups(self):
        d = self.values["data"]
        return (data.SubgroupSpec("light", d["light_lo"], d["light_hi"], d["light_lesion"]),
                data.SubgroupSpec("dark", d["dark_lo"], d["dark_hi"], d["dark_lesion"]))

    def image_shape(self):
        d = self.values["data"]
        return (d["image_size"], d["image_size"], d["channels"])

    def train_config(self) -> vae.TrainConfig:
        t = self.values["train"]
        return vae.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], beta=t["beta"],
                               perceptual=t["perceptual"])

    def probe_config(self) -> uq.ProbeConfig:
        p = self.values["probes"]
        return uq.ProbeConfig(p["count"], p["distribution"], p["seed"])

    def map_probes(self) -> uq.ProbeConfig:
        m = self.values["maps"]
        return uq.ProbeConfig(m["count"], "rademacher", m["seed"])

    def prior_precision(self):
        a = self.values["curvature"]["prior_precision"]
        return a if a > 0 else None

    def pipeline_settings(self):
        from .experiments import PipelineSettings

        d, m, c = self.values["data"], self.values["model"], self.values["curvature"]
        return PipelineSettings(
            image_size=d["image_size"], channels=d["channels"], n_train=d["n_train"], n_test=d["n_test"],
            subgroups=self.subgroups(), width=m["width"], latent_dim=m["latent_dim"], stages=m["stages"],
            train=self.train_config(), k=c["k"], k_keep=c["k_keep"], mode=c["mode"], subset=c["subset"],
            sketch_dim=c["sketch_dim"] or None, n_curvature=c["n_curvature"], probes=self.probe_config(),
            prior_precision=self.prior_precision(), latent_sample=c["latent_sample"],
        )

    def scoring_model(self, model):
        """The model as used for curvature and scoring under this config."""
        c = self.values["curvature"]
        return vae.with_latent_sample(model, c["seed"]) if c["latent_sample"] else model
