"""Test distributions: parametric image corruptions at five severities.

A domain is (corruption kind, severity, seed).  Corruption is a pure
function of (image, domain, sample_seed): the same triple always produces
the same bytes.  Outputs are float32 clipped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

CORRUPTION_KINDS = (
    "identity",
    "gaussian_noise",
    "impulse_noise",
    "motion_blur",
    "jpeg_quantize",
    "elastic_warp",
    "spatter",
    "contrast",
    "brightness",
)

SEVERITIES = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be in {SEVERITIES}, got {self.severity}")

    def label(self) -> str:
        return f"{self.kind}:{self.severity}"


@dataclass(frozen=True)
class DomainSet:
    domains: tuple[DomainSpec, ...]
    role: str  # "source" or "target"

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValueError(f"role must be 'source' or 'target', got {self.role!r}")
        if not self.domains:
            raise ValueError(f"{self.role} domain set is empty")

    def __len__(self):
        return len(self.domains)

    def __getitem__(self, i) -> DomainSpec:
        return self.domains[i]


def check_disjoint(source: DomainSet, target: DomainSet) -> None:
    """Source and target must not share any (kind, severity) pair."""
    src = {(d.kind, d.severity) for d in source.domains}
    tgt = {(d.kind, d.severity) for d in target.domains}
    overlap = src & tgt
    if overlap:
        shared = ", ".join(f"{k}:{s}" for k, s in sorted(overlap))
        raise ValueError(f"source and target domains overlap: {shared}")


# severity tables, index = severity - 1
_GAUSS_SIGMA = (0.04, 0.07, 0.11, 0.16, 0.22)
_IMPULSE_P = (0.02, 0.04, 0.07, 0.11, 0.17)
_BLUR_FRAC = (0.14, 0.20, 0.28, 0.37, 0.48)      # kernel length as fraction of height
_JPEG_STEP = (0.05, 0.09, 0.14, 0.21, 0.30)      # DCT quantization step
_ELASTIC_AMP = (0.9, 1.6, 2.4, 3.3, 4.4)         # displacement px at 16px height
_SPATTER_FRAC = (0.05, 0.09, 0.14, 0.20, 0.27)   # blob coverage fraction
_CONTRAST_C = (0.70, 0.55, 0.42, 0.30, 0.20)
_BRIGHT_D = (0.10, 0.16, 0.23, 0.31, 0.40)


def _rng_for(spec: DomainSpec, sample_seed: int) -> np.random.Generator:
    kind_id = CORRUPTION_KINDS.index(spec.kind)
    return np.random.default_rng(
        np.random.SeedSequence((spec.seed & 0xFFFFFFFF, int(sample_seed) & 0xFFFFFFFFFFFF, kind_id))
    )


def _line_kernel(length_px: float, angle: float) -> np.ndarray:
    """Normalized linear motion kernel rasterized with bilinear weights."""
    k = max(3, int(np.ceil(length_px)) | 1)  # odd
    kern = np.zeros((k, k))
    c = (k - 1) / 2.0
    n_pts = 4 * k
    ts = np.linspace(-length_px / 2.0, length_px / 2.0, n_pts)
    for t in ts:
        y = c + t * np.sin(angle)
        x = c + t * np.cos(angle)
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - y0, x - x0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < k and 0 <= xx < k:
                    kern[yy, xx] += wy * wx
    return kern / kern.sum()


def apply_corruption(x: np.ndarray, spec: DomainSpec, sample_seed: int) -> np.ndarray:
    """Corrupt one (C,H,W) image in [0,1]; deterministic in all arguments."""
    if x.ndim != 3:
        raise ValueError(f"expected (C,H,W) image, got shape {x.shape}")
    x = np.asarray(x, dtype=np.float32)
    c, h, w = x.shape
    s = spec.severity - 1
    rng = _rng_for(spec, sample_seed)

    if spec.kind == "identity":
        return x.copy()

    if spec.kind == "gaussian_noise":
        out = x + rng.normal(0.0, _GAUSS_SIGMA[s], size=x.shape)

    elif spec.kind == "impulse_noise":
        out = x.copy()
        mask = rng.random(size=(h, w)) < _IMPULSE_P[s]
        salt = rng.random(size=(h, w)) < 0.5
        out[:, mask & salt] = 1.0
        out[:, mask & ~salt] = 0.0

    elif spec.kind == "motion_blur":
        length = max(2.0, _BLUR_FRAC[s] * h)
        angle = rng.uniform(0.0, np.pi)
        kern = _line_kernel(length, angle)
        out = np.stack([ndimage.convolve(x[ch], kern, mode="nearest") for ch in range(c)])

    elif spec.kind == "jpeg_quantize":
        # blockwise 8x8 DCT with uniform coefficient quantization
        step = _JPEG_STEP[s]
        ph, pw = (-h) % 8, (-w) % 8
        xp = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect") if (ph or pw) else x
        hb, wb = xp.shape[1] // 8, xp.shape[2] // 8
        blocks = xp.reshape(c, hb, 8, wb, 8).transpose(0, 1, 3, 2, 4)
        coeffs = sfft.dctn(blocks, axes=(-2, -1), norm="ortho")
        coeffs = np.round(coeffs / step) * step
        rec = sfft.idctn(coeffs, axes=(-2, -1), norm="ortho")
        out = rec.transpose(0, 1, 3, 2, 4).reshape(c, hb * 8, wb * 8)[:, :h, :w]

    elif spec.kind == "elastic_warp":
        amp = _ELASTIC_AMP[s] * h / 16.0
        sigma = max(1.5, 0.18 * h)
        disp = ndimage.gaussian_filter(rng.standard_normal((2, h, w)), sigma=(0, sigma, sigma))
        norm = np.sqrt((disp ** 2).sum(axis=0)).max()
        disp = disp * (amp / max(norm, 1e-8))
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        coords = np.stack([rows + disp[0], cols + disp[1]])
        out = np.stack(
            [ndimage.map_coordinates(x[ch], coords, order=1, mode="reflect") for ch in range(c)]
        )

    elif spec.kind == "spatter":
        field = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(1.0, 0.08 * h))
        thr = np.quantile(field, 1.0 - _SPATTER_FRAC[s])
        mask = field >= thr
        value = 0.9 if rng.random() < 0.5 else 0.08
        out = x.copy()
        out[:, mask] = 0.25 * out[:, mask] + 0.75 * value

    elif spec.kind == "contrast":
        m = x.mean()
        out = (x - m) * _CONTRAST_C[s] + m

    elif spec.kind == "brightness":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out = x + sign * _BRIGHT_D[s]

    else:  # pragma: no cover - guarded by DomainSpec validation
        raise ValueError(f"unknown corruption kind {spec.kind!r}")

    return np.clip(out, 0.0, 1.0).astype(np.float32)
