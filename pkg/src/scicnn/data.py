"""Image ingestion, patch extraction, fold assignment and the synthetic camera simulator."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath

import numpy as np
from PIL import Image

from .errors import (ConfigError, IngestError, InvalidParameterError, ManifestError,
                     StratificationError, TooSmallError)
from .tensor import TRAIN_DTYPE, Rng

log = logging.getLogger(__name__)

PATCH = 32
GRID = 16  # tiles per side of the 512x512 centre crop

DEVICES = ("IP5", "SG4", "SGT2")
SENSORS = ("IP5_F", "IP5_B", "SG4_F", "SG4_B", "SGT2_F")
SENSOR_DEVICE = {s: s.rsplit("_", 1)[0] for s in SENSORS}
LABEL_MODES = {"model": DEVICES, "sensor": SENSORS}

MANIFEST_FIELDS = ("path", "device", "sensor")
LOSSLESS_FORMATS = {"PNG", "PPM"}


def class_names(label_mode: str) -> tuple[str, ...]:
    try:
        return LABEL_MODES[label_mode]
    except KeyError:
        raise ConfigError(f"label mode must be 'model' or 'sensor', got {label_mode!r}") from None


@dataclass
class ImageRecord:
    image_id: str
    pixels: np.ndarray  # [3, H, W] in [0, 1]
    device: str
    sensor: str
    path: str | None = None

    def __post_init__(self):
        check_labels(self.device, self.sensor)

    def label(self, label_mode: str) -> int:
        names = class_names(label_mode)
        return names.index(self.device if label_mode == "model" else self.sensor)


def check_labels(device: str, sensor: str, where: str = "") -> None:
    if device not in DEVICES:
        raise ManifestError(f"{where}unknown device {device!r}")
    if sensor not in SENSORS:
        raise ManifestError(f"{where}unknown sensor {sensor!r}")
    if SENSOR_DEVICE[sensor] != device:
        raise ManifestError(f"{where}sensor {sensor} does not belong to device {device}")


@dataclass
class Patch:
    pixels: np.ndarray  # [3, 32, 32]
    label: int
    source_image_id: str


@dataclass
class PatchDataset:
    """Patches stored as stacked arrays; iterating yields :class:`Patch` objects."""

    pixels: np.ndarray  # [P, 3, 32, 32]
    labels: np.ndarray  # [P]
    source_ids: np.ndarray  # [P] object array of image ids
    label_mode: str
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.class_names:
            self.class_names = class_names(self.label_mode)
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise ConfigError(f"label {self.labels.max()} out of range for {self.num_classes} classes")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        for x, y, s in zip(self.pixels, self.labels, self.source_ids):
            yield Patch(x, int(y), s)

    def subset(self, index) -> "PatchDataset":
        return PatchDataset(self.pixels[index], self.labels[index], self.source_ids[index],
                            self.label_mode, self.class_names)

    @classmethod
    def from_patches(cls, patches: list[Patch], label_mode: str) -> "PatchDataset":
        if not patches:
            return cls(np.zeros((0, 3, PATCH, PATCH), TRAIN_DTYPE), np.zeros(0, np.int64),
                       np.zeros(0, object), label_mode)
        return cls(np.stack([p.pixels for p in patches]).astype(TRAIN_DTYPE, copy=False),
                   np.array([p.label for p in patches], np.int64),
                   np.array([p.source_image_id for p in patches], object), label_mode)

    @classmethod
    def from_records(cls, records, label_mode: str) -> "PatchDataset":
        patches = [p for r in records for p in extract_patches(r, label_mode)]
        return cls.from_patches(patches, label_mode)


# ---------------------------------------------------------------------------
# ingestion

def read_image(path, allow_jpeg: bool = False) -> np.ndarray:
    """Decode an 8-bit image file into a float32 [3, H, W] array in [0, 1]."""
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in LOSSLESS_FORMATS:
                if fmt == "JPEG" and allow_jpeg:
                    warnings.warn(f"{path}: JPEG recompression perturbs sensor noise", stacklevel=2)
                else:
                    raise IngestError(f"{path}: unsupported image format {fmt}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except IngestError:
        raise
    except (OSError, ValueError) as exc:
        raise IngestError(f"cannot read image {path}: {exc}") from exc
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(TRAIN_DTYPE)


def load_manifest(path, allow_jpeg: bool = False) -> list[ImageRecord]:
    """Load a ``path,device,sensor`` CSV. Image paths are relative to the manifest."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read manifest {path}: {exc}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        log.warning("manifest %s is empty", path)
        return []
    header = [h.strip() for h in rows[0]]
    if tuple(header) != MANIFEST_FIELDS:
        raise ManifestError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}, got {','.join(header)}")
    records, seen = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not any(c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        rel, device, sensor = (c.strip() for c in row)
        check_labels(device, sensor, where=f"{path}:{lineno}: ")
        image_id = str(PurePosixPath(rel))
        if image_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate image {rel}")
        seen.add(image_id)
        img_path = path.parent / rel
        records.append(ImageRecord(image_id, read_image(img_path, allow_jpeg), device, sensor,
                                   path=str(img_path)))
    if not records:
        log.warning("manifest %s lists no images", path)
    return records


def write_manifest(records, path) -> None:
    """Write records as a manifest whose paths are relative to the manifest's directory."""
    path = Path(path)
    lines = [",".join(MANIFEST_FIELDS)]
    for r in records:
        if r.path is None:
            raise IngestError(f"record {r.image_id} has no file on disk")
        src = Path(r.path).resolve()
        try:
            rel = src.relative_to(path.parent.resolve())
        except ValueError:
            rel = src
        lines.append(f"{PurePosixPath(rel)},{r.device},{r.sensor}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# patches

def patch_grid(h: int, w: int) -> list[tuple[int, int]]:
    """Top-left corners of the tiles: a centred grid of at most 16x16 tiles."""
    if h < PATCH or w < PATCH:
        raise TooSmallError(f"image {h}x{w} is smaller than {PATCH}x{PATCH}")
    nh, nw = min(h // PATCH, GRID), min(w // PATCH, GRID)
    top, left = (h - nh * PATCH) // 2, (w - nw * PATCH) // 2
    return [(top + i * PATCH, left + j * PATCH) for i in range(nh) for j in range(nw)]


def extract_patches(img: ImageRecord, label_mode: str) -> list[Patch]:
    _, h, w = img.pixels.shape
    label = img.label(label_mode)
    return [Patch(img.pixels[:, y:y + PATCH, x:x + PATCH], label, img.image_id)
            for y, x in patch_grid(h, w)]


# ---------------------------------------------------------------------------
# folds

@dataclass
class FoldAssignment:
    folds: dict[str, int]  # image_id -> fold index
    n_folds: int

    def test_ids(self, k: int) -> set[str]:
        return {i for i, f in self.folds.items() if f == k}

    def train_ids(self, k: int) -> set[str]:
        return {i for i, f in self.folds.items() if f != k}

    def split(self, records, k: int):
        test = [r for r in records if self.folds[r.image_id] == k]
        train = [r for r in records if self.folds[r.image_id] != k]
        return train, test

    def digest(self) -> str:
        blob = json.dumps(sorted(self.folds.items()), separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def split_by_image(records, folds: int = 10, rng: Rng | None = None,
                   label_mode: str = "sensor") -> FoldAssignment:
    """Stratified image-level fold assignment.

    Each class's images are shuffled and dealt round-robin into folds,
    continuing from where the previous class stopped so fold sizes stay
    within one image of each other.
    """
    if folds < 2:
        raise ConfigError(f"need at least 2 folds, got {folds}")
    rng = rng or Rng(0)
    by_class: dict[int, list[str]] = {}
    for r in records:
        by_class.setdefault(r.label(label_mode), []).append(r.image_id)
    if len({r.image_id for r in records}) != len(records):
        raise ConfigError("image ids must be unique")
    names = class_names(label_mode)
    assignment: dict[str, int] = {}
    offset = 0
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        if len(ids) < folds:
            raise StratificationError(f"class {names[cls]} has {len(ids)} images, fewer than {folds} folds")
        for j, pos in enumerate(rng.permutation(len(ids))):
            assignment[ids[pos]] = (offset + j) % folds
        offset += len(ids)
    return FoldAssignment(assignment, folds)


# ---------------------------------------------------------------------------
# normalization

def channel_means(ds: PatchDataset) -> np.ndarray:
    return ds.pixels.mean(axis=(0, 2, 3), dtype=np.float64)


def normalize(ds: PatchDataset, train_stats) -> PatchDataset:
    """Subtract per-channel means computed on the training folds."""
    mean = np.asarray(train_stats, dtype=ds.pixels.dtype).reshape(1, -1, 1, 1)
    return PatchDataset(ds.pixels - mean, ds.labels, ds.source_ids, ds.label_mode, ds.class_names)


# ---------------------------------------------------------------------------
# synthetic cameras

BINOMIAL5 = np.array([1, 4, 6, 4, 1], dtype=np.float64) / 16.0
# std of BINOMIAL5 (x) BINOMIAL5 applied to unit white noise: sum(w^2) = 70/256 per axis
_BLUR_STD = 70.0 / 256.0


@dataclass
class SyntheticCameraSpec:
    sensor: str
    fingerprint: np.ndarray  # [3, 32, 32], multiplicative
    readout_std: float
    correlation_group: str | None = None

    @property
    def class_id(self) -> int:
        return SENSORS.index(self.sensor)


@dataclass
class SyntheticScene:
    """Parameters of the smooth base image that the sensor noise rides on."""

    mean_lo: float = 0.3
    mean_hi: float = 0.7
    tint: float = 0.05
    contrast: float = 0.1
    clip_lo: float = 0.05
    clip_hi: float = 0.95


def make_camera_specs(n_classes: int, rng: Rng, sigma_f: float = 0.05, sigma_r: float = 0.01,
                      correlated: bool = False, delta_std: float = 0.01) -> list[SyntheticCameraSpec]:
    """Draw one fingerprint per sensor class.

    With ``correlated=True`` sensors of the same device share a device
    pattern (std ``sigma_f``) and differ by a per-sensor delta (std
    ``delta_std``).
    """
    if sigma_f < 0 or sigma_r < 0 or delta_std < 0:
        raise InvalidParameterError("sigma_f, sigma_r and delta_std must be >= 0")
    if not 1 <= n_classes <= len(SENSORS):
        raise InvalidParameterError(f"class count must be in 1..{len(SENSORS)}, got {n_classes}")
    shape = (3, PATCH, PATCH)
    group_patterns: dict[str, np.ndarray] = {}
    specs = []
    for sensor in SENSORS[:n_classes]:
        if correlated:
            group = SENSOR_DEVICE[sensor]
            if group not in group_patterns:
                group_patterns[group] = rng.gaussian(shape, 0.0, sigma_f, dtype=np.float64)
            fp = group_patterns[group] + rng.gaussian(shape, 0.0, delta_std, dtype=np.float64)
        else:
            group = None
            fp = rng.gaussian(shape, 0.0, sigma_f, dtype=np.float64)
        specs.append(SyntheticCameraSpec(sensor, fp, sigma_r, group))
    return specs


def blur5(field: np.ndarray) -> np.ndarray:
    """Separable 5x5 binomial blur over the last two axes, reflect boundary."""
    out = field
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (2, 2)
        p = np.pad(out, pad, mode="reflect")
        n = out.shape[axis]
        out = sum(w * np.take(p, np.arange(i, i + n), axis=axis) for i, w in enumerate(BINOMIAL5))
    return out


def smooth_base(rng: Rng, h: int, w: int, scene: SyntheticScene = SyntheticScene()) -> np.ndarray:
    level = rng.uniform((1,), scene.mean_lo, scene.mean_hi, dtype=np.float64)
    tint = rng.uniform((3, 1, 1), -scene.tint, scene.tint, dtype=np.float64)
    texture = blur5(rng.gaussian((h, w), 0.0, 1.0, dtype=np.float64)) / _BLUR_STD
    base = level + tint + scene.contrast * texture[None]
    return np.clip(base, scene.clip_lo, scene.clip_hi)


def tile_fingerprint(fp: np.ndarray, h: int, w: int) -> np.ndarray:
    reps = (1, -(-h // fp.shape[1]), -(-w // fp.shape[2]))
    return np.tile(fp, reps)[:, :h, :w]


def generate_synthetic(specs, images_per_class: int, rng: Rng, height: int = 64, width: int = 64,
                       scene: SyntheticScene = SyntheticScene()) -> list[ImageRecord]:
    """Render ``clip(base * (1 + fingerprint) + readout, 0, 1)`` images per camera."""
    if not specs:
        raise InvalidParameterError("need at least one camera spec")
    if images_per_class < 1:
        raise InvalidParameterError(f"images_per_class must be >= 1, got {images_per_class}")
    for s in specs:
        if s.readout_std < 0:
            raise InvalidParameterError(f"{s.sensor}: readout std must be >= 0")
    if height < PATCH or width < PATCH:
        raise TooSmallError(f"synthetic images must be at least {PATCH}x{PATCH}")
    records = []
    for s in specs:
        fp = tile_fingerprint(s.fingerprint, height, width)
        for i in range(images_per_class):
            base = smooth_base(rng, height, width, scene)
            noise = rng.gaussian((3, height, width), 0.0, s.readout_std, dtype=np.float64)
            img = np.clip(base * (1.0 + fp) + noise, 0.0, 1.0).astype(TRAIN_DTYPE)
            records.append(ImageRecord(f"{s.sensor}_{i:04d}", img, SENSOR_DEVICE[s.sensor], s.sensor))
    return records


def write_synthetic(records, specs, out_dir, seed: int, params: dict | None = None) -> Path:
    """Write PNGs, ``manifest.csv`` and the ``synthetic.json`` sidecar. Returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for r in records:
        dest = out / "images" / f"{r.image_id}.png"
        arr = np.round(np.clip(r.pixels, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, "RGB").save(dest, format="PNG")
        r.path = str(dest)
    manifest = out / "manifest.csv"
    write_manifest(records, manifest)
    sidecar = {
        "seed": seed,
        "cameras": [{"sensor": s.sensor, "readout_std": s.readout_std,
                     "correlation_group": s.correlation_group,
                     "fingerprint_std": float(s.fingerprint.std())} for s in specs],
        **(params or {}),
    }
    (out / "synthetic.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return manifest
