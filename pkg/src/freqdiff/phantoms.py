"""Procedural multi-contrast phantoms and the dataset container format.

Each sample is a stack of four perfectly registered 2-D images that share a
label map (background, two tissue classes, an optional lesion and its rim)
but render it with different contrast tables and different amounts of
blur, so the T1 analog is the smoothest and the T1ce analog the sharpest.

Container layout (all integers little-endian)::

    magic      8 bytes   b"FQDSET\\r\\n"
    version    u32
    count      u64
    height     u32
    width      u32
    n_mod      u32
    gen_seed   u64
    names      n_mod x (u8 length + utf-8 bytes)
    offsets    count x u64   absolute byte offset of each record
    records    count x (seed u64, n_mod*H*W float32, H*W uint8 labels)
    crc32      u32           over every preceding byte

A ``<file>.manifest`` sidecar repeats the header fields as ``key = value``
lines.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, ContractError, DataIOError

MODALITIES: tuple[str, ...] = ("T1", "T2", "FLAIR", "T1ce")
LABELS = ("background", "tissue_a", "tissue_b", "lesion", "rim")

# rows: modality, columns: label (background, tissue A, tissue B, lesion, rim).
# Each modality hides one distinction that another reveals, so more sources
# carry strictly more information.
CONTRAST_TABLE = np.array(
    [
        [-1.0, 0.50, 0.00, 0.00, -0.20],  # T1: lesion indistinct from tissue B
        [-1.0, -0.40, 0.20, 0.70, 0.70],  # T2: rim indistinct from lesion
        [-1.0, -0.10, 0.30, 0.90, 0.60],  # FLAIR
        [-1.0, 0.30, -0.20, -0.20, 0.95],  # T1ce: bright enhancing rim
    ]
)
# blur per modality in pixels at 32x32, scaled with image size
BLUR_SIGMA = np.array([1.4, 0.9, 0.6, 0.0])
NOISE_SIGMA = 0.02

MAGIC = b"FQDSET\r\n"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


@dataclass
class PhantomSample:
    modalities: np.ndarray  # (n_mod, H, W) float32 in [-1, 1]
    tissue_map: np.ndarray  # (H, W) uint8 label ids
    seed: int

    @property
    def size(self) -> tuple[int, int]:
        return self.modalities.shape[1], self.modalities.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PhantomSample):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.modalities.dtype == other.modalities.dtype
            and np.array_equal(self.modalities, other.modalities)
            and np.array_equal(self.tissue_map, other.tissue_map)
        )


@dataclass
class DatasetManifest:
    count: int
    height: int
    width: int
    modalities: tuple[str, ...]
    generator_seed: int
    offsets: tuple[int, ...]
    version: int = FORMAT_VERSION

    def to_text(self) -> str:
        lines = [
            f"format_version = {self.version}",
            f"sample_count = {self.count}",
            f"image_height = {self.height}",
            f"image_width = {self.width}",
            f"modalities = {','.join(self.modalities)}",
            f"generator_seed = {self.generator_seed}",
            f"offsets = {','.join(str(o) for o in self.offsets)}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataIOError(f"malformed manifest line: {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            kv[k] = v
        try:
            return cls(
                count=int(kv["sample_count"]),
                height=int(kv["image_height"]),
                width=int(kv["image_width"]),
                modalities=tuple(kv["modalities"].split(",")),
                generator_seed=int(kv["generator_seed"]),
                offsets=tuple(int(o) for o in kv["offsets"].split(",") if o),
                version=int(kv["format_version"]),
            )
        except (KeyError, ValueError) as exc:
            raise DataIOError(f"malformed manifest: {exc}") from exc


# ---------------------------------------------------------------------------
# generation

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    """Independent per-sample seed for sample ``index`` of a dataset."""
    return splitmix64((splitmix64(master & _MASK64) + index) & _MASK64)


def normalize_intensity(image, lo: float, hi: float) -> np.ndarray:
    """Affine map of [lo, hi] onto [-1, 1], clamped."""
    if not hi > lo:
        raise ContractError(f"degenerate intensity range [{lo}, {hi}]")
    out = 2.0 * (np.asarray(image, dtype=np.float64) - lo) / (hi - lo) - 1.0
    return np.clip(out, -1.0, 1.0)


def render_labels(tissue_map: np.ndarray, table: np.ndarray = CONTRAST_TABLE) -> np.ndarray:
    """Contrast-table lookup, one image per table row."""
    return table[:, tissue_map]


def _label_map(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    u, v = (xx - c) / c, (yy - c) / c

    # head: rotated ellipse
    theta = rng.uniform(-0.3, 0.3)
    ra, rb = rng.uniform(0.72, 0.9), rng.uniform(0.62, 0.82)
    cu, cv = rng.uniform(-0.05, 0.05, size=2)
    ur = (u - cu) * np.cos(theta) + (v - cv) * np.sin(theta)
    vr = -(u - cu) * np.sin(theta) + (v - cv) * np.cos(theta)
    head = (ur / ra) ** 2 + (vr / rb) ** 2 <= 1.0

    # two tissue classes split by a smooth random field
    field = np.zeros((size, size))
    for _ in range(6):
        bu, bv = rng.uniform(-0.7, 0.7, size=2)
        w = rng.uniform(0.15, 0.4)
        field += rng.choice([-1.0, 1.0]) * np.exp(-((u - bu) ** 2 + (v - bv) ** 2) / (2 * w * w))
    thresh = np.median(field[head]) if head.any() else 0.0
    labels = np.zeros((size, size), dtype=np.uint8)
    labels[head] = 1
    labels[head & (field > thresh)] = 2

    # lesion with rim in about half the samples
    if rng.random() < 0.5:
        lr = rng.uniform(0.18, 0.32)
        for _ in range(20):
            lu, lv = rng.uniform(-0.5, 0.5, size=2)
            if ((lu - cu) / ra) ** 2 + ((lv - cv) / rb) ** 2 < 0.5:
                break
        squash = rng.uniform(0.7, 1.0)
        d = np.sqrt(((u - lu) / lr) ** 2 + ((v - lv) / (lr * squash)) ** 2)
        rim_frac = max(1.0 - 2.5 / (lr * c), 0.3)  # rim about 2.5 px thick
        inside = head & (d <= 1.0)
        labels[inside] = 4
        labels[inside & (d <= rim_frac)] = 3
    return labels


def generate_sample(seed: int, size: int = 32) -> PhantomSample:
    if int(size) != size or size < 8 or size % 2:
        raise ConfigurationError(f"phantom size must be an even integer >= 8, got {size}")
    rng = np.random.default_rng(seed & _MASK64)
    labels = _label_map(rng, size)
    clean = render_labels(labels)
    scale = size / 32.0
    mods = np.empty((len(MODALITIES), size, size), dtype=np.float32)
    for m in range(len(MODALITIES)):
        img = clean[m]
        if BLUR_SIGMA[m] > 0:
            img = gaussian_filter(img, BLUR_SIGMA[m] * scale, mode="mirror")
        img = img + NOISE_SIGMA * rng.standard_normal((size, size))
        mods[m] = np.clip(img, -1.0, 1.0)
    return PhantomSample(mods, labels, int(seed))


def generate_dataset(count: int, size: int = 32, seed: int = 0) -> list[PhantomSample]:
    return [generate_sample(derive_seed(seed, i), size) for i in range(count)]


def stack_modalities(samples: Sequence[PhantomSample]) -> np.ndarray:
    return np.stack([s.modalities for s in samples])


# ---------------------------------------------------------------------------
# container IO

_HEAD = struct.Struct("<IQIIIQ")


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def write_dataset(samples: Sequence[PhantomSample], path, generator_seed: int = 0, names: Sequence[str] = MODALITIES) -> DatasetManifest:
    samples = list(samples)
    if not samples:
        raise ContractError("refusing to write an empty dataset")
    n_mod, H, W = samples[0].modalities.shape
    if len(names) != n_mod:
        raise ContractError(f"{len(names)} modality names for {n_mod} channels")
    for s in samples:
        if s.modalities.shape != (n_mod, H, W) or s.tissue_map.shape != (H, W):
            raise ContractError("all samples must share one geometry")

    header = bytearray(MAGIC)
    header += _HEAD.pack(FORMAT_VERSION, len(samples), H, W, n_mod, generator_seed & _MASK64)
    for name in names:
        raw = name.encode("utf-8")
        header += struct.pack("<B", len(raw)) + raw
    rec_size = 8 + 4 * n_mod * H * W + H * W
    first = len(header) + 8 * len(samples)
    offsets = [first + i * rec_size for i in range(len(samples))]
    header += struct.pack(f"<{len(samples)}Q", *offsets)

    body = bytearray(header)
    for s in samples:
        body += struct.pack("<Q", s.seed & _MASK64)
        body += np.ascontiguousarray(s.modalities, dtype="<f4").tobytes()
        body += np.ascontiguousarray(s.tissue_map, dtype=np.uint8).tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    path = Path(path)
    path.write_bytes(bytes(body))
    manifest = DatasetManifest(len(samples), H, W, tuple(names), generator_seed, tuple(offsets))
    manifest_path(path).write_text(manifest.to_text())
    return manifest


def read_dataset(path, with_manifest: bool = False):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read dataset {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + _HEAD.size + 4 or blob[: len(MAGIC)] != MAGIC:
        raise DataIOError(f"{path}: not a dataset container (bad magic or too short)")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise DataIOError(f"{path}: CRC mismatch (file truncated or corrupted)")
    version, count, H, W, n_mod, gen_seed = _HEAD.unpack_from(blob, len(MAGIC))
    if version not in SUPPORTED_VERSIONS:
        raise DataIOError(f"{path}: unsupported format version {version}")
    pos = len(MAGIC) + _HEAD.size
    names = []
    for _ in range(n_mod):
        (n,) = struct.unpack_from("<B", blob, pos)
        names.append(blob[pos + 1 : pos + 1 + n].decode("utf-8"))
        pos += 1 + n
    offsets = struct.unpack_from(f"<{count}Q", blob, pos)
    rec_size = 8 + 4 * n_mod * H * W + H * W
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise DataIOError(f"{path}: record offsets not strictly increasing")
    if count and offsets[-1] + rec_size != len(blob) - 4:
        raise DataIOError(f"{path}: record table does not match file length")

    samples = []
    for off in offsets:
        (seed,) = struct.unpack_from("<Q", blob, off)
        mods = np.frombuffer(blob, dtype="<f4", count=n_mod * H * W, offset=off + 8)
        labels = np.frombuffer(blob, dtype=np.uint8, count=H * W, offset=off + 8 + 4 * n_mod * H * W)
        samples.append(PhantomSample(mods.reshape(n_mod, H, W).astype(np.float32), labels.reshape(H, W).copy(), int(seed)))
    manifest = DatasetManifest(count, H, W, tuple(names), gen_seed, tuple(offsets), version)

    side = manifest_path(path)
    if side.exists():
        on_disk = DatasetManifest.from_text(side.read_text())
        if on_disk != manifest:
            raise DataIOError(f"{side}: manifest disagrees with container (count {on_disk.count} vs {manifest.count})")
    return (samples, manifest) if with_manifest else samples


def iter_batches(samples: Sequence[PhantomSample], batch_size: int, rng: np.random.Generator) -> Iterable[list[PhantomSample]]:
    """Shuffled minibatches; a trailing batch smaller than 2 is dropped."""
    order = rng.permutation(len(samples))
    for i in range(0, len(order), batch_size):
        idx = order[i : i + batch_size]
        if len(idx) >= 2:
            yield [samples[j] for j in idx]
