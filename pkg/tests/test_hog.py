import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cytoclass.errors import DimensionNotMultipleOfCell, InvalidConfig
from cytoclass.hog import HogConfig, extract_hog, extract_hog_batch, hog_feature_len


def hog_oracle(p, cfg):
    """Scalar re-implementation, one pixel and one block at a time."""
    h, w = p.shape
    span = 360.0 if cfg.signed else 180.0
    width = span / cfg.n_bins
    cy, cx = h // cfg.cell_size, w // cfg.cell_size
    hist = np.zeros((cy, cx, cfg.n_bins))
    for y in range(h):
        for x in range(w):
            gx = p[y, min(x + 1, w - 1)] - p[y, max(x - 1, 0)]
            gy = p[min(y + 1, h - 1), x] - p[max(y - 1, 0), x]
            mag = math.hypot(gx, gy)
            ang = math.degrees(math.atan2(gy, gx)) % span
            pos = ang / width - 0.5
            lo = math.floor(pos)
            frac = pos - lo
            hist[y // cfg.cell_size, x // cfg.cell_size, lo % cfg.n_bins] += mag * (1 - frac)
            hist[y // cfg.cell_size, x // cfg.cell_size, (lo + 1) % cfg.n_bins] += mag * frac
    out = []
    b, s = cfg.block_size, cfg.block_stride
    for by in range(0, cy - b + 1, s):
        for bx in range(0, cx - b + 1, s):
            v = np.concatenate([hist[by + i, bx + j] for i in range(b) for j in range(b)])
            v = v / math.sqrt(float(v @ v) + 1e-24)
            v = np.minimum(v, cfg.clip)
            v = v / math.sqrt(float(v @ v) + 1e-24)
            out.append(v)
    return np.concatenate(out)


configs = st.builds(
    lambda cell, block, stride_frac, bins, signed, clip: HogConfig(
        cell, block, max(1, min(block, round(stride_frac * block))), bins, signed, clip),
    st.integers(2, 6), st.integers(1, 3), st.floats(0, 1), st.integers(2, 12), st.booleans(), st.floats(0.05, 1.0),
)


def test_feature_length_examples():
    assert hog_feature_len(HogConfig(), 64, 64) == 1764
    assert hog_feature_len(HogConfig(), 128, 64) == 3780
    assert hog_feature_len(HogConfig(block_size=1), 64, 64) == 576
    assert extract_hog(np.zeros((64, 64))).shape == (1764,)


def test_dimension_checks():
    with pytest.raises(DimensionNotMultipleOfCell):
        hog_feature_len(HogConfig(), 60, 64)
    with pytest.raises(DimensionNotMultipleOfCell):
        extract_hog(np.zeros((20, 24)))


@pytest.mark.parametrize("kw", [dict(cell_size=1), dict(block_size=0), dict(block_stride=3),
                                dict(n_bins=1), dict(clip=0.0), dict(clip=1.5)])
def test_config_validation(kw):
    with pytest.raises(InvalidConfig):
        HogConfig(**kw)


def test_vertical_step_edge_hand_trace():
    # left half 0, right half 1: eight pixels with gx = 1, gy = 0, i.e. 0 degrees,
    # which sits on the boundary between bin 8 ([160,180)) and bin 0 ([0,20)).
    # Each pixel votes 0.5 to both, giving cell histogram [4,0,...,0,4];
    # L2 gives 1/sqrt(2) each, the 0.2 clip then renormalization restores it.
    p = np.zeros((4, 4))
    p[:, 2:] = 1.0
    v = extract_hog(p, HogConfig(cell_size=4, block_size=1))
    expect = np.zeros(9)
    expect[0] = expect[8] = 1 / math.sqrt(2)
    assert np.allclose(v, expect, atol=1e-12)


def test_constant_plane_is_exactly_zero():
    assert not np.any(extract_hog(np.full((64, 64), 0.37)))


@given(configs, st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_matches_scalar_oracle(cfg, mx, my, seed):
    w = cfg.cell_size * (cfg.block_size + mx - 1)
    h = cfg.cell_size * (cfg.block_size + my - 1)
    p = np.random.default_rng(seed).random((h, w))
    got = extract_hog(p, cfg)
    assert got.shape == (hog_feature_len(cfg, w, h),)
    assert np.allclose(got, hog_oracle(p, cfg), atol=1e-12, rtol=0)


def test_batch_equals_single():
    planes = np.random.default_rng(0).random((3, 16, 24))
    batch = extract_hog_batch(planes)
    for i in range(3):
        assert np.array_equal(batch[i], extract_hog(planes[i]))


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0), st.floats(0.0, 0.5))
def test_nonneg_block_norm_and_contrast_invariance(seed, a, b):
    p = np.random.default_rng(seed).random((32, 32))
    v = extract_hog(p)
    assert v.min() >= 0
    norms = np.linalg.norm(v.reshape(-1, 36), axis=1)
    assert np.all((np.abs(norms - 1) <= 1e-9) | (norms == 0))
    q = a * p + b * (1 - a)  # stays inside [0, 1]
    assert np.max(np.abs(extract_hog(q) - v)) <= 1e-9
