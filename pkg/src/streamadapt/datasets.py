"""In-memory image datasets: a synthetic glyph generator and a byte-record
binary format (1 label byte + C*H*W pixel bytes per record).

Glyphs are rigid bar compositions with a canonical upright orientation and
no rotational self-symmetry, so both classification and the 4-way rotation
pretext are learnable.  Position, scale, and intensities are jittered.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# each glyph: list of axis-aligned bars (x, y, w, h) in glyph-local [0,1]^2,
# y increasing downward
GLYPH_TEMPLATES = (
    ("arrow", ((0.44, 0.04, 0.12, 0.10), (0.32, 0.14, 0.36, 0.10),
               (0.20, 0.24, 0.60, 0.10), (0.42, 0.34, 0.16, 0.58))),
    ("tee", ((0.12, 0.08, 0.76, 0.16), (0.42, 0.24, 0.16, 0.64))),
    ("ell", ((0.18, 0.08, 0.16, 0.76), (0.18, 0.68, 0.54, 0.16))),
    ("eff", ((0.20, 0.06, 0.16, 0.82), (0.20, 0.06, 0.58, 0.15), (0.20, 0.42, 0.44, 0.14))),
    ("hook", ((0.28, 0.08, 0.48, 0.14), (0.52, 0.08, 0.16, 0.72), (0.18, 0.66, 0.50, 0.14))),
    ("flag", ((0.30, 0.06, 0.14, 0.84), (0.44, 0.10, 0.36, 0.28))),
    ("step", ((0.14, 0.64, 0.30, 0.16), (0.36, 0.40, 0.30, 0.16), (0.58, 0.16, 0.30, 0.16))),
    ("bowl", ((0.26, 0.06, 0.15, 0.84), (0.41, 0.50, 0.32, 0.32))),
    ("seven", ((0.16, 0.08, 0.64, 0.15), (0.54, 0.23, 0.17, 0.20),
               (0.43, 0.43, 0.17, 0.20), (0.32, 0.63, 0.17, 0.26))),
    ("arm", ((0.26, 0.18, 0.16, 0.72), (0.42, 0.18, 0.34, 0.16))),
)


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32 in [0,1]
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n,C,H,W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range for num_classes")

    def __len__(self):
        return self.images.shape[0]


_SUPER = 4  # supersampling factor for antialiased bar rendering


def _render_glyph(template, size: int, rng: np.random.Generator) -> np.ndarray:
    hi = size * _SUPER
    bg = rng.uniform(0.02, 0.22)
    fg = rng.uniform(0.60, 1.00)
    scale = rng.uniform(0.62, 0.95)
    ox = rng.uniform(-0.06, 0.06)
    oy = rng.uniform(-0.06, 0.06)
    canvas = np.full((hi, hi), bg, dtype=np.float32)
    for (x, y, w, h) in template:
        x0 = (0.5 + ox + (x - 0.5) * scale) * hi
        y0 = (0.5 + oy + (y - 0.5) * scale) * hi
        x1 = x0 + w * scale * hi
        y1 = y0 + h * scale * hi
        xi0, yi0 = max(0, int(round(x0))), max(0, int(round(y0)))
        xi1, yi1 = min(hi, int(round(x1))), min(hi, int(round(y1)))
        if xi1 > xi0 and yi1 > yi0:
            canvas[yi0:yi1, xi0:xi1] = fg
    # box-filter downsample -> fractional edge coverage
    return canvas.reshape(size, _SUPER, size, _SUPER).mean(axis=(1, 3))


def generate_synthetic_glyphs(
    n: int, num_classes: int, image_size: int, rng: np.random.Generator, channels: int = 1
) -> Dataset:
    """Balanced glyph dataset with jittered position/scale/intensity."""
    if num_classes > len(GLYPH_TEMPLATES):
        raise ValueError(
            f"num_classes {num_classes} exceeds the {len(GLYPH_TEMPLATES)} available glyphs"
        )
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.empty((n, channels, image_size, image_size), dtype=np.float32)
    for i in range(n):
        img = _render_glyph(GLYPH_TEMPLATES[labels[i]][1], image_size, rng)
        images[i] = img[None, :, :]
    return Dataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# binary record io
# ---------------------------------------------------------------------------

RECORD_FORMAT = "byte-records-v1"


def save_records(dataset: Dataset, manifest_path) -> Path:
    """Write `manifest_path` plus a sibling .records file: per record one
    label byte followed by C*H*W row-major pixel bytes (0..255)."""
    manifest_path = Path(manifest_path)
    records_path = manifest_path.with_name(manifest_path.stem + ".records")
    n, c, h, w = dataset.images.shape
    pixels = np.round(dataset.images * 255.0).astype(np.uint8).reshape(n, c * h * w)
    rows = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    records_path.write_bytes(rows.tobytes())
    manifest_path.write_text(
        "\n".join(
            [
                f"format = {RECORD_FORMAT}",
                f"records = {records_path.name}",
                f"count = {n}",
                f"channels = {c}",
                f"height = {h}",
                f"width = {w}",
                f"num_classes = {dataset.num_classes}",
            ]
        )
        + "\n"
    )
    return manifest_path


def load_records(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    kv = {}
    for ln in manifest_path.read_text().splitlines():
        ln = ln.strip()
        if ln and not ln.startswith("#"):
            key, _, value = ln.partition("=")
            kv[key.strip()] = value.strip()
    if kv.get("format") != RECORD_FORMAT:
        raise ValueError(f"{manifest_path}: unknown dataset format {kv.get('format')!r}")
    n = int(kv["count"])
    c, h, w = int(kv["channels"]), int(kv["height"]), int(kv["width"])
    raw = manifest_path.with_name(kv["records"]).read_bytes()
    rec_len = 1 + c * h * w
    if len(raw) != n * rec_len:
        raise ValueError(
            f"{manifest_path}: expected {n * rec_len} bytes ({n} records of {rec_len}), got {len(raw)}"
        )
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(n, rec_len)
    labels = rows[:, 0].astype(np.int64)
    images = rows[:, 1:].astype(np.float32).reshape(n, c, h, w) / 255.0
    return Dataset(images, labels, int(kv["num_classes"]))
