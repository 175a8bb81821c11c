"""Corruption family: determinism, range, severity ordering, disjointness."""

import numpy as np
import pytest

from streamadapt.datasets import generate_synthetic_glyphs
from streamadapt.domains import (
    CORRUPTION_KINDS,
    DomainSet,
    DomainSpec,
    apply_corruption,
    check_disjoint,
)


@pytest.fixture(scope="module")
def glyph_image():
    ds = generate_synthetic_glyphs(4, 4, 16, np.random.default_rng(0))
    return ds.images[0]


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
@pytest.mark.parametrize("severity", [1, 3, 5])
def test_output_range_dtype_and_determinism(glyph_image, kind, severity):
    spec = DomainSpec(kind, severity, seed=7)
    a = apply_corruption(glyph_image, spec, sample_seed=123)
    b = apply_corruption(glyph_image, spec, sample_seed=123)
    assert a.dtype == np.float32
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert a.tobytes() == b.tobytes()


def test_different_sample_seeds_differ(glyph_image):
    spec = DomainSpec("gaussian_noise", 3, seed=7)
    a = apply_corruption(glyph_image, spec, sample_seed=1)
    b = apply_corruption(glyph_image, spec, sample_seed=2)
    assert not np.array_equal(a, b)


def test_identity_is_bit_exact(glyph_image):
    out = apply_corruption(glyph_image, DomainSpec("identity", 1, seed=0), sample_seed=5)
    assert out.tobytes() == glyph_image.tobytes()


@pytest.mark.parametrize("kind", ["gaussian_noise", "impulse_noise", "motion_blur", "contrast"])
def test_mean_abs_change_monotone_in_severity(kind):
    ds = generate_synthetic_glyphs(16, 4, 16, np.random.default_rng(1))
    deltas = []
    for severity in (1, 2, 3, 4, 5):
        spec = DomainSpec(kind, severity, seed=3)
        d = [
            np.abs(apply_corruption(img, spec, sample_seed=i) - img).mean()
            for i, img in enumerate(ds.images)
        ]
        deltas.append(np.mean(d))
    assert all(b >= a for a, b in zip(deltas, deltas[1:])), f"{kind}: {deltas}"


def test_unknown_kind_and_bad_severity_rejected():
    with pytest.raises(ValueError, match="unknown corruption kind"):
        DomainSpec("fog_of_war", 1, 0)
    with pytest.raises(ValueError, match="severity"):
        DomainSpec("gaussian_noise", 6, 0)
    with pytest.raises(ValueError, match="severity"):
        DomainSpec("gaussian_noise", 0, 0)


def test_domain_set_roles_and_disjointness():
    src = DomainSet((DomainSpec("gaussian_noise", 1), DomainSpec("contrast", 2)), "source")
    tgt = DomainSet((DomainSpec("spatter", 4),), "target")
    check_disjoint(src, tgt)  # no overlap: fine
    with pytest.raises(ValueError, match="overlap"):
        check_disjoint(src, DomainSet((DomainSpec("contrast", 2),), "target"))
    with pytest.raises(ValueError, match="role"):
        DomainSet((DomainSpec("contrast", 2),), "sideways")
    with pytest.raises(ValueError, match="empty"):
        DomainSet((), "source")


def test_corruption_rejects_bad_input_shape():
    with pytest.raises(ValueError, match="expected"):
        apply_corruption(np.zeros((16, 16), dtype=np.float32), DomainSpec("contrast", 1), 0)
