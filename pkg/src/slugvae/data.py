"""Synthetic skin-tone-analog images, artifact injection, and file I/O.

Each image is a flat tinted base tone with one darker elliptical lesion and
Gaussian pixel noise. Subgroups differ in their base-tone interval and lesion
contrast. Artifacts (ruler, patch, ink) are painted on top and come with an
exact mask of the pixels they touched.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, LoadError
from .rng import stream

RAW_MAGIC = b"SLUGIMGF"
RAW_VERSION = 1
MANIFEST_HEADER = ["path", "subgroup", "split", "artifact", "seed"]
SPLITS = ("train", "test")
ARTIFACT_KINDS = ("ruler", "patch", "ink")
NOISE_SIGMA = 0.02
# per-channel tint applied to the base tone (reddish skin analog)
TINT = np.array([1.0, 0.82, 0.70])


@dataclass(frozen=True)
class SubgroupSpec:
    label: str
    lo: float
    hi: float
    lesion_offset: float = 0.25
    count: int = 0  # test images for this subgroup; 0 defers to the generator's size argument

    def __post_init__(self):
        if not 0.0 <= self.lo < self.hi <= 1.0:
            raise ConfigurationError(f"subgroup {self.label!r}: need 0 <= lo < hi <= 1, got [{self.lo}, {self.hi}]")
        if self.count < 0:
            raise ConfigurationError(f"subgroup {self.label!r}: count must be >= 0")


LIGHT = SubgroupSpec("light", 0.65, 0.85, lesion_offset=0.30)
DARK = SubgroupSpec("dark", 0.15, 0.35, lesion_offset=0.12)
DEFAULT_SUBGROUPS = (LIGHT, DARK)


@dataclass
class ArtifactSpec:
    kind: str
    geometry: dict = field(default_factory=dict)
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ARTIFACT_KINDS:
            raise ConfigurationError(f"unknown artifact kind {self.kind!r}; expected one of {ARTIFACT_KINDS}")


@dataclass(frozen=True)
class Record:
    path: str
    subgroup: str
    split: str
    artifact: str = "none"
    seed: int = 0


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    records: list

    def __len__(self):
        return len(self.records)

    def select(self, mask) -> Dataset:
        idx = np.flatnonzero(mask)
        return Dataset(self.images[idx], [self.records[i] for i in idx])

    def split(self, name) -> Dataset:
        return self.select([r.split == name for r in self.records])

    def subgroup(self, label) -> Dataset:
        return self.select([r.subgroup == label for r in self.records])

    @property
    def labels(self):
        return [r.subgroup for r in self.records]


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _coords(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return yy + 0.5, xx + 0.5


def render_image(spec: SubgroupSpec, seed: int, image_shape=(32, 32, 3)) -> np.ndarray:
    """One synthetic image from its own seed."""
    h, w, c = image_shape
    rng = stream(seed, "render")
    tint = np.resize(TINT, c)
    tone = rng.uniform(spec.lo, spec.hi)
    img = np.empty(image_shape)
    img[...] = tone * tint
    yy, xx = _coords(h, w)
    scale = min(h, w) / 32.0
    cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
    a, b = rng.uniform(3.0, 8.0) * scale, rng.uniform(2.5, 6.0) * scale
    theta = rng.uniform(0.0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    lesion = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    depth = spec.lesion_offset * rng.uniform(0.7, 1.3)
    # lesions darken green/blue more than red
    lesion_shift = depth * np.resize(np.array([0.8, 1.0, 1.0]), c)
    img[lesion] -= lesion_shift
    img += rng.normal(0.0, NOISE_SIGMA, size=image_shape)
    return np.clip(img, 0.0, 1.0)


def allocate(mix_ratio, n, k=2):
    """Per-subgroup training counts; a float ratio applies to the first of two groups."""
    if np.isscalar(mix_ratio):
        r = float(mix_ratio)
        if not 0.0 <= r <= 1.0:
            raise ConfigurationError(f"mix ratio must lie in [0, 1], got {r}")
        if k != 2:
            raise ConfigurationError("a scalar mix ratio needs exactly two subgroups")
        first = int(np.floor(r * n + 0.5))
        return [first, n - first]
    weights = np.asarray(mix_ratio, dtype=float)
    if weights.shape != (k,) or np.any(weights < 0) or weights.sum() <= 0:
        raise ConfigurationError(f"mix weights {mix_ratio} do not fit {k} subgroups")
    raw = weights / weights.sum() * n
    counts = np.floor(raw).astype(int)
    # largest remainders get the leftover samples, ties by subgroup order
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def generate_dataset(specs=DEFAULT_SUBGROUPS, mix_ratio=0.5, sizes=(600, 128), seed=0,
                     image_shape=(32, 32, 3)) -> Dataset:
    """Training set mixed by ``mix_ratio`` plus a per-subgroup test set.

    ``sizes = (n_train, n_test_per_subgroup)``. Records carry the seed that
    regenerates each image via :func:`render_image`.
    """
    specs = list(specs)
    n_train, n_test = (int(s) for s in sizes)
    if n_train < 1 or n_test < 1:
        raise ConfigurationError(f"dataset sizes must be >= 1, got {sizes}")
    counts = allocate(mix_ratio, n_train, len(specs))
    images, records = [], []
    for split, per_group in (("train", counts), ("test", [s.count or n_test for s in specs])):
        for g, (spec, count) in enumerate(zip(specs, per_group)):
            for i in range(count):
                rec_seed = int(stream(seed, "record", split, g, i).integers(2**62))
                images.append(render_image(spec, rec_seed, image_shape))
                records.append(Record(f"{split}_{spec.label}_{i:05d}.ppm", spec.label, split, "none", rec_seed))
    return Dataset(np.stack(images), records)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

MASK_BOUNDS = (0.01, 0.30)
PATCH_COLOR = (0.10, 0.55, 0.85)
INK_COLOR = (0.30, 0.12, 0.50)


def _paint_ruler(h, w, c, rng, geo):
    band = geo.get("band", max(2, int(round(0.12 * h))))
    horizontal = geo.get("horizontal", bool(rng.integers(2)))
    extent = h if horizontal else w
    start = geo.get("start", int(rng.integers(0, max(1, extent - band + 1))))
    start = int(np.clip(start, 0, max(0, extent - band)))
    period = geo.get("period", 2)
    mask = np.zeros((h, w), dtype=bool)
    values = np.zeros((h, w, c))
    if horizontal:
        mask[start : start + band, :] = True
        stripes = (np.arange(w) // period) % 2 == 0
        values[:, stripes] = 0.95
        values[:, ~stripes] = 0.05
    else:
        mask[:, start : start + band] = True
        stripes = (np.arange(h) // period) % 2 == 0
        values[stripes, :] = 0.95
        values[~stripes, :] = 0.05
    return mask, values, {"band": band, "horizontal": horizontal, "start": start, "period": period}


def _disk(h, w, cy, cx, r):
    yy, xx = _coords(h, w)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _paint_patch(h, w, c, rng, geo):
    r = geo.get("radius", rng.uniform(0.10, 0.16) * min(h, w))
    cy = geo.get("cy", rng.uniform(r, h - r))
    cx = geo.get("cx", rng.uniform(r, w - r))
    color = geo.get("color", PATCH_COLOR)
    mask = _disk(h, w, cy, cx, r)
    values = np.empty((h, w, c))
    values[...] = np.resize(np.asarray(color, dtype=float), c)
    return mask, values, {"radius": r, "cy": cy, "cx": cx, "color": tuple(color)}


def _paint_ink(h, w, c, rng, geo):
    n = geo.get("count", int(rng.integers(3, 8)))
    n = int(np.clip(n, 3, 7))
    s = min(h, w)
    disks = geo.get("disks")
    if disks is None:
        # a loose cluster, like a pen mark
        cy0, cx0 = rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w
        disks = [
            (cy0 + rng.normal(0, 0.12 * s), cx0 + rng.normal(0, 0.12 * s), rng.uniform(0.05, 0.09) * s)
            for _ in range(n)
        ]
    mask = np.zeros((h, w), dtype=bool)
    for cy, cx, r in disks:
        mask |= _disk(h, w, cy, cx, r)
    values = np.empty((h, w, c))
    values[...] = np.resize(np.asarray(geo.get("color", INK_COLOR), dtype=float), c)
    return mask, values, {"count": len(disks), "disks": [tuple(map(float, d)) for d in disks]}


_PAINTERS = {"ruler": _paint_ruler, "patch": _paint_patch, "ink": _paint_ink}


def realize_artifact(image, spec: ArtifactSpec, seed: int):
    """Paint an artifact; returns ``(new_image, realized_spec)``.

    The realized spec carries the geometry actually drawn and the mask.
    Pixels outside the mask are untouched. Randomly drawn geometry is redrawn
    (deterministically) until the mask covers 1%-30% of the image; explicit
    geometry is clipped to the image and used as given. ``spec`` itself is
    not modified.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w, c = image.shape
    lo, hi = MASK_BOUNDS
    for attempt in range(64):
        rng = stream(seed, "artifact", spec.kind, attempt)
        mask, values, geometry = _PAINTERS[spec.kind](h, w, c, rng, spec.geometry)
        if lo <= mask.mean() <= hi or spec.geometry:
            break
    out = image.copy()
    out[mask] = np.clip(values[mask], 0.0, 1.0)
    return out, ArtifactSpec(spec.kind, geometry, mask)


def inject_artifact(image, spec: ArtifactSpec, seed: int):
    """Paint an artifact; returns ``(new_image, mask)``."""
    out, realized = realize_artifact(image, spec, seed)
    return out, realized.mask


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_raw(path, array) -> None:
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    h, w, c = a.shape
    Path(path).write_bytes(RAW_MAGIC + struct.pack("<IIII", RAW_VERSION, h, w, c) + a.astype("<f8").tobytes())


def read_raw(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != RAW_MAGIC or len(raw) < 24:
        raise LoadError(f"{path}: not a raw image sidecar")
    version, h, w, c = struct.unpack("<IIII", raw[8:24])
    if version != RAW_VERSION:
        raise LoadError(f"{path}: unsupported raw image version {version}")
    if len(raw) != 24 + 8 * h * w * c:
        raise LoadError(f"{path}: size does not match a {h}x{w}x{c} image")
    return np.frombuffer(raw, dtype="<f8", offset=24).reshape(h, w, c).astype(np.float64)


def to_uint8(a):
    return np.clip(np.floor(np.asarray(a) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(path, image) -> None:
    """8-bit binary pixmap (RGB) or graymap (single channel)."""
    a = to_uint8(image)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    Image.fromarray(a).save(path, format="PPM")


def write_pgm16(path, image) -> None:
    a = np.clip(np.floor(np.asarray(image) * 65535.0 + 0.5), 0, 65535).astype(np.uint16)
    Image.fromarray(a).save(path, format="PPM")


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            mode = im.mode
            a = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise LoadError(f"{path}: cannot decode image ({exc})") from exc
    scale = 65535.0 if mode.startswith("I") else 255.0
    a = a.astype(np.float64) / scale
    return a[:, :, None] if a.ndim == 2 else a


def raw_sidecar(path) -> Path:
    return Path(path).with_suffix(".raw")


def save_dataset(dataset: Dataset, directory, manifest_name="manifest.csv") -> Path:
    """Write every image as a pixmap plus raw sidecar and a CSV manifest."""
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for img, rec in zip(dataset.images, dataset.records):
        rel = Path("images") / Path(rec.path).name
        write_ppm(d / rel, img)
        write_raw(raw_sidecar(d / rel), img)
        rows.append(replace(rec, path=rel.as_posix()))
    manifest = d / manifest_name
    write_manifest(manifest, rows)
    return manifest


def write_manifest(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.path, r.subgroup, r.split, r.artifact, r.seed])


def read_manifest(path) -> list[Record]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise LoadError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise LoadError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields")
            if row[2] not in SPLITS:
                raise LoadError(f"{path}:{lineno}: unknown split {row[2]!r}")
            try:
                seed = int(row[4])
            except ValueError as exc:
                raise LoadError(f"{path}:{lineno}: seed is not an integer") from exc
            records.append(Record(row[0], row[1], row[2], row[3], seed))
    return records


def resize_bilinear(image, size):
    """Bilinear resize of an (H, W, C) image to ``size = (H', W')``."""
    h, w = image.shape[:2]
    if (h, w) == tuple(size):
        return image
    zoom = (size[0] / h, size[1] / w, 1)
    out = ndimage.zoom(image, zoom, order=1, mode="nearest", grid_mode=True)
    return np.clip(out, 0.0, 1.0)


def load_dataset(manifest_path, image_size=None, split=None, prefer_raw=True) -> Dataset:
    """Load images listed in a manifest (paths relative to the manifest).

    Raw sidecars are preferred when present (exact values); otherwise the
    8-bit pixmap is decoded. ``image_size=(H, W)`` resizes bilinearly.
    """
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    if split is not None:
        records = [r for r in records if r.split == split]
    images = []
    for rec in records:
        path = manifest_path.parent / rec.path
        if not path.exists():
            raise LoadError(f"record {rec.path}: file not found")
        side = raw_sidecar(path)
        try:
            img = read_raw(side) if prefer_raw and side.exists() else read_image(path)
        except LoadError as exc:
            raise LoadError(f"record {rec.path}: {exc}") from exc
        if image_size is not None:
            img = resize_bilinear(img, image_size)
        images.append(img)
    if not images:
        shape = (0,) + ((tuple(image_size) + (3,)) if image_size else (0, 0, 0))
        return Dataset(np.zeros(shape), [])
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise LoadError(f"{manifest_path}: images have differing shapes {sorted(shapes)}; pass image_size")
    return Dataset(np.stack(images), records)


def mse_per_sample(model, dataset, chunk=128) -> np.ndarray:
    """Per-record reconstruction MSE, in dataset order."""
    from .vae import reconstruct, recon_term

    images = dataset.images if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.float64)
    out = [
        np.atleast_1d(recon_term(images[i : i + chunk], reconstruct(model, images[i : i + chunk])))
        for i in range(0, len(images), chunk)
    ]
    return np.concatenate(out) if out else np.zeros(0)
