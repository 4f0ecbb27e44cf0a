import numpy as np
import pytest
from scipy import ndimage

from wsrtl.data.flow import FlowField, extract_flow


def textured(size=64, seed=0):
    rng = np.random.default_rng(seed)
    return ndimage.gaussian_filter(rng.random((size, size)), 1.5)


def block_match(a, b, block=8, radius=3):
    """Exhaustive integer block matching: displacement of each block of a in b."""
    h, w = a.shape
    out = []
    for y in range(radius, h - block - radius, block):
        for x in range(radius, w - block - radius, block):
            ref = a[y:y + block, x:x + block]
            best, arg = np.inf, (0, 0)
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    err = np.abs(b[y + dy:y + dy + block, x + dx:x + dx + block] - ref).sum()
                    if err < best:
                        best, arg = err, (dx, dy)
            out.append(arg)
    return np.array(out)


def test_identical_frames_give_zero_flow():
    a = textured()
    flow = extract_flow(a, a)
    assert max(np.abs(flow.u).max(), np.abs(flow.v).max()) < 0.05


def test_one_pixel_shift_is_recovered_and_agrees_with_block_matching():
    a = textured(seed=1)
    b = np.roll(a, 1, axis=1)
    oracle = block_match(a, b)
    assert np.all(oracle == [1, 0])
    flow = extract_flow(a, b)
    inner = (slice(8, -8), slice(8, -8))
    assert 0.8 <= np.median(flow.u[inner]) <= 1.2
    assert -0.2 <= np.median(flow.v[inner]) <= 0.2


def test_translation_flow_is_antisymmetric():
    a = textured(seed=2)
    b = np.roll(a, (1, -1), axis=(0, 1))
    inner = (slice(8, -8), slice(8, -8))
    f = extract_flow(a, b)
    r = extract_flow(b, a)
    assert abs(np.median(f.u[inner] + r.u[inner])) < 0.3
    assert abs(np.median(f.v[inner] + r.v[inner])) < 0.3


def test_local_motion_concentrates_flow_mass():
    # static textured background; one textured patch moves 2 px down
    bg = textured(96, seed=3) * 0.5
    patch = textured(24, seed=4)
    a = bg.copy()
    b = bg.copy()
    a[30:54, 36:60] = patch
    b[32:56, 36:60] = patch
    flow = extract_flow(a, b)
    mag = flow.magnitude
    inside = mag[26:60, 32:64].sum()
    assert inside / mag.sum() >= 0.7


def test_size_mismatch_fails():
    with pytest.raises(ValueError):
        extract_flow(np.zeros((10, 10)), np.zeros((10, 12)))


def test_flow_field_helpers():
    f = FlowField(np.full((2, 2), 3.0), np.full((2, 2), 4.0))
    assert np.allclose(f.magnitude, 5.0)
    assert np.array_equal(FlowField.from_array(f.as_array()).v, f.v)
    with pytest.raises(ValueError):
        FlowField(np.zeros((2, 2)), np.zeros((3, 2)))
    assert np.isfinite(extract_flow(textured(), textured(seed=9)).as_array()).all()
