"""Image/mask files, dataset manifests and seeded synthetic segmentation tasks.

Files are binary netpbm: ``P5`` (gray) or ``P6`` (RGB) images and ``P5``
masks, all with maxval 255. A manifest is a UTF-8 text file::

    # residual-peft manifest v1
    <id>\t<image-relpath>\t<mask-relpath>\t<split>

Every random draw for sample ``i`` of a dataset seeded with ``seed`` comes from
a Philox-4x64-10 stream keyed by ``(seed, i)`` (numpy's ``Philox``), consumed
only through ``Generator.random()`` doubles. Geometry (centres, radii, side
lengths) is turned into integers before any inside/outside test, so masks do
not depend on platform floating point.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "NetpbmError",
    "ManifestError",
    "Sample",
    "ManifestEntry",
    "DatasetManifest",
    "SynthSpec",
    "read_netpbm",
    "write_netpbm",
    "load_pgm_pair",
    "write_manifest",
    "read_manifest",
    "synth_shapes",
    "synth_camouflage",
    "synthesize",
    "split_load",
    "stack",
    "quantize",
    "directory_digest",
    "best_threshold_mae",
]

MANIFEST_HEADER = "# residual-peft manifest v1"
SPLITS = ("train", "test")


class NetpbmError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # H x W x C, floats in [0, 1]
    mask: np.ndarray   # H x W, values in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        if self.image.ndim != 3 or self.mask.ndim != 2 or self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} disagree")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"sample {self.id}: mask values must be 0 or 1")


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n\r]*[\n\r])*(\S+)")


def read_netpbm(path) -> np.ndarray:
    """Read a binary PGM/PPM with maxval 255 as uint8 ``H x W`` or ``H x W x 3``."""
    raw = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise NetpbmError(f"{path}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: unsupported magic {magic!r}, expected P5 or P6")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise NetpbmError(f"{path}: non-numeric header field in {fields[1:]}") from None
    if width < 1 or height < 1:
        raise NetpbmError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"{path}: maxval {maxval} unsupported, only 255")
    if pos >= len(raw) or raw[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise NetpbmError(f"{path}: missing whitespace after header")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    body = raw[pos:]
    if len(body) != expected:
        raise NetpbmError(f"{path}: expected {expected} raster bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(height, width) if channels == 1 else arr.reshape(height, width, 3)


def write_netpbm(path, pixels: np.ndarray) -> None:
    """Write uint8 ``H x W`` (P5), ``H x W x 1`` (P5) or ``H x W x 3`` (P6)."""
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        raise NetpbmError(f"netpbm writer needs uint8 pixels, got {px.dtype}")
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[:, :, 0]
    if px.ndim == 2:
        magic = b"P5"
    elif px.ndim == 3 and px.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"cannot store pixel array of shape {px.shape}")
    h, w = px.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(px).tobytes())


def quantize(image: np.ndarray) -> np.ndarray:
    """Floats in [0, 1] to uint8 by rounding half to even."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def load_pgm_pair(image_path, mask_path, sample_id: str | None = None) -> Sample:
    img = read_netpbm(image_path)
    mask = read_netpbm(mask_path)
    if mask.ndim != 2:
        raise NetpbmError(f"{mask_path}: mask must be single-channel PGM")
    if img.shape[:2] != mask.shape:
        raise NetpbmError(f"image {image_path} is {img.shape[0]}x{img.shape[1]} but mask "
                          f"{mask_path} is {mask.shape[0]}x{mask.shape[1]}")
    image = img.astype(np.float64) / 255.0
    return Sample(image, (mask >= 128).astype(np.float64), sample_id or Path(image_path).stem)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str
    mask: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    version: int = 1
    path: Path | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


def write_manifest(path, entries: Sequence[ManifestEntry]) -> Path:
    path = Path(path)
    lines = [MANIFEST_HEADER]
    for e in entries:
        for value in (e.id, e.image, e.mask, e.split):
            if "\t" in value or "\n" in value:
                raise ManifestError(f"manifest field {value!r} contains a tab or newline")
        lines.append(f"{e.id}\t{e.image}\t{e.mask}\t{e.split}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    lines = text.split("\n")
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ManifestError(f"{path}: missing header line {MANIFEST_HEADER!r}")
    entries, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        entry = ManifestEntry(*parts)
        if entry.split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {entry.split!r}")
        if entry.id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {entry.id!r}")
        seen.add(entry.id)
        entries.append(entry)
    return DatasetManifest(path.parent, entries, 1, path)


def split_load(manifest: DatasetManifest, split: str) -> list[Sample]:
    """Load and validate every sample of ``split`` in manifest order."""
    chosen = manifest.split(split)
    if not chosen:
        raise ManifestError(f"split {split!r} is empty in {manifest.path or manifest.root}")
    samples = []
    for e in chosen:
        img_path, mask_path = manifest.root / e.image, manifest.root / e.mask
        try:
            samples.append(load_pgm_pair(img_path, mask_path, e.id))
        except (OSError, ValueError) as exc:
            raise ManifestError(f"failed to load sample {e.id!r} ({img_path}, {mask_path}): {exc}") from exc
    return samples


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """``(images B x H x W x C, masks B x H x W)``."""
    if not samples:
        raise ValueError("no samples")
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    task: str = "camouflage"
    size: int = 64
    n_train: int = 200
    n_test: int = 50
    seed: int = 0
    # camouflage: foreground brightness lift over the shared texture
    contrast: float = 0.15
    # camouflage: half-width of the per-image illumination offset
    illumination: float = 0.25
    texture_amplitude: float = 0.12
    texture_cell: int = 8
    noise: float = 0.04

    def __post_init__(self):
        if self.task not in ("shapes", "camouflage"):
            raise ValueError(f"unknown synthetic task {self.task!r}")
        if self.size < 8:
            raise ValueError(f"size must be at least 8, got {self.size}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.texture_cell < 1 or self.size % self.texture_cell:
            raise ValueError(f"texture_cell {self.texture_cell} must divide size {self.size}")

    def check_patch(self, patch_size: int) -> None:
        if self.size % patch_size:
            raise ValueError(f"synthetic size {self.size} is not divisible by patch size {patch_size}")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


def _randint(rng: np.random.Generator, lo: int, hi: int) -> int:
    """Integer in [lo, hi] from one uniform double."""
    return lo + int(rng.random() * (hi - lo + 1))


def _shape_mask(rng: np.random.Generator, size: int, lo_frac: int, hi_frac: int) -> np.ndarray:
    """Filled ellipse or rectangle; integer geometry only."""
    r_lo, r_hi = max(2, size * lo_frac // 100), max(3, size * hi_frac // 100)
    ry, rx = _randint(rng, r_lo, r_hi), _randint(rng, r_lo, r_hi)
    cy, cx = _randint(rng, ry // 2, size - 1 - ry // 2), _randint(rng, rx // 2, size - 1 - rx // 2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.int64)
    dy, dx = yy - cy, xx - cx
    if rng.random() < 0.5:
        return (dy * dy * rx * rx + dx * dx * ry * ry) <= rx * rx * ry * ry
    return (np.abs(dy) <= ry * 3 // 4) & (np.abs(dx) <= rx * 3 // 4)


def _value_noise(rng: np.random.Generator, size: int, cell: int) -> np.ndarray:
    """Bilinearly interpolated lattice of uniform values, in [0, 1]."""
    g = size // cell + 1
    lattice = rng.random((g, g))
    t = (np.arange(size) % cell) / cell
    i = np.arange(size) // cell
    rows = lattice[i] * (1 - t)[:, None] + lattice[i + 1] * t[:, None]
    return rows[:, i] * (1 - t)[None, :] + rows[:, i + 1] * t[None, :]


def _shapes_sample(spec: SynthSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = sample_rng(spec.seed, index)
    s = spec.size
    while True:
        background = 0.15 + 0.7 * rng.random()
        count = _randint(rng, 1, 3)
        image = np.full((s, s), background)
        mask = np.zeros((s, s), dtype=bool)
        levels: list[float] = []
        for _ in range(count):
            region = _shape_mask(rng, s, 8, 30)
            # distinct gray level, well separated from the background
            while True:
                level = rng.random()
                if abs(level - background) >= 0.3 and all(abs(level - v) >= 0.1 for v in levels):
                    break
            levels.append(level)
            image[region] = level
            mask |= region
        image = image + spec.noise * (rng.random((s, s)) - 0.5) * 2
        frac = mask.mean()
        if 0.05 <= frac <= 0.6:
            return np.clip(image, 0, 1), mask


def _camouflage_sample(spec: SynthSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = sample_rng(spec.seed, index)
    s = spec.size
    while True:
        mask = _shape_mask(rng, s, 25, 45)
        if rng.random() < 0.5:
            mask |= _shape_mask(rng, s, 15, 30)
        frac = mask.mean()
        if 0.25 <= frac <= 0.6:
            break
    texture = _value_noise(rng, s, spec.texture_cell)
    grain = rng.random((s, s))
    offset = 0.5 + spec.illumination * (2 * rng.random() - 1)
    image = offset + spec.texture_amplitude * (2 * texture - 1) + spec.noise * (2 * grain - 1)
    image = image + spec.contrast * mask
    return np.clip(image, 0, 1), mask


def synthesize(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write images, masks and ``manifest.tsv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    make = _shapes_sample if spec.task == "shapes" else _camouflage_sample
    entries = []
    total = spec.n_train + spec.n_test
    for i in range(total):
        image, mask = make(spec, i)
        sid = f"{spec.task}-{i:05d}"
        img_rel, mask_rel = f"images/{sid}.pgm", f"masks/{sid}.pgm"
        write_netpbm(out / img_rel, quantize(image))
        write_netpbm(out / mask_rel, (mask * 255).astype(np.uint8))
        entries.append(ManifestEntry(sid, img_rel, mask_rel, "train" if i < spec.n_train else "test"))
    path = write_manifest(out / "manifest.tsv", entries)
    return DatasetManifest(out, entries, 1, path)


def synth_shapes(spec: SynthSpec, out_dir) -> DatasetManifest:
    if spec.task != "shapes":
        raise ValueError("synth_shapes needs task='shapes'")
    return synthesize(spec, out_dir)


def synth_camouflage(spec: SynthSpec, out_dir) -> DatasetManifest:
    if spec.task != "camouflage":
        raise ValueError("synth_camouflage needs task='camouflage'")
    return synthesize(spec, out_dir)


def directory_digest(manifest: DatasetManifest) -> str:
    """SHA-256 over the manifest and every referenced file, in manifest order."""
    h = hashlib.sha256()
    h.update(Path(manifest.path).read_bytes())
    for e in manifest.entries:
        for rel in (e.image, e.mask):
            h.update(rel.encode())
            h.update((manifest.root / rel).read_bytes())
    return h.hexdigest()


def best_threshold_mae(samples: Iterable[Sample]) -> dict:
    """Lowest pixel MAE of any single global intensity threshold on ``samples``.

    Foreground is predicted where the 8-bit channel-mean intensity is >= t (or
    < t with inverted polarity); t sweeps 0..256, so all-background and
    all-foreground predictions are included. The threshold is chosen on the
    very samples it is scored on, which makes this the most generous
    threshold baseline.
    """
    fg = np.zeros(256, dtype=np.int64)
    bg = np.zeros(256, dtype=np.int64)
    for s in samples:
        level = quantize(s.image.mean(axis=2)).ravel()
        m = s.mask.ravel() > 0.5
        fg += np.bincount(level[m], minlength=256)
        bg += np.bincount(level[~m], minlength=256)
    total = int(fg.sum() + bg.sum())
    if total == 0:
        raise ValueError("no samples")
    # errors when predicting foreground for level >= t, t = 0..256
    upright = np.concatenate([np.cumsum(bg[::-1])[::-1], [0]]) + np.concatenate([[0], np.cumsum(fg)])
    inverted = total - upright
    if upright.min() <= inverted.min():
        t, polarity, wrong = int(upright.argmin()), 1, int(upright.min())
    else:
        t, polarity, wrong = int(inverted.argmin()), -1, int(inverted.min())
    return {"threshold": t, "polarity": polarity, "mae": wrong / total}
