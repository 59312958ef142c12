import os
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lightcone import data
from lightcone.data import DataConfig, DatasetFormatError
from lightcone.rng import RandomState

SMALL = DataConfig(n_sequences=12, frames_per_seq=30, seed=7)


@pytest.fixture(scope="module")
def small():
    return data.generate(SMALL)


def test_same_seed_is_bit_identical(small):
    again = data.generate(SMALL)
    for a, b in zip(small, again):
        assert a.pixels.tobytes() == b.pixels.tobytes()
        assert a.trajectory.tobytes() == b.trajectory.tobytes()
        assert a.sprite_id == b.sprite_id


def test_different_seed_differs(small):
    other = data.generate(replace(SMALL, seed=8))
    assert any(a.pixels.tobytes() != b.pixels.tobytes() for a, b in zip(small, other))


def test_static_world_frames_identical():
    ds = data.generate(replace(SMALL, v_max=0.0, n_sequences=4))
    for s in ds:
        assert np.all(s.pixels == s.pixels[0])
        assert np.all(s.trajectory == 0.0)


def test_shapes_and_range(small):
    assert len(small) == 12
    for s in small:
        f = s.frames
        assert f.shape == (30, 32, 32)
        assert f.min() >= 0.0 and f.max() <= 1.0


def test_full_scale_frame_count():
    cfg = DataConfig(n_sequences=10_000)
    assert cfg.n_sequences * cfg.frames_per_seq == 300_000


def test_velocity_bounded(small):
    for s in small:
        speeds = np.linalg.norm(s.trajectory, axis=1)
        assert speeds.max() <= SMALL.v_max + 1e-12


def test_jitter_bounded():
    # away from bounces, consecutive steps differ only by jitter (each within 0.05 * v_max);
    # a wide frame with the usual sprite pixel size keeps bounces rare
    ds = data.generate(replace(SMALL, n_sequences=6, image_side=128, sprite_px_range=(4.5, 6.25)))
    for s in ds:
        flip = np.any(np.sign(s.trajectory[1:]) != np.sign(s.trajectory[:-1]), axis=1)
        near = flip.copy()
        near[1:] |= flip[:-1]
        near[:-1] |= flip[1:]
        diff = np.abs(np.diff(s.trajectory, axis=0))
        assert np.all(diff[~near] <= 0.1 * SMALL.v_max + 1e-9)


def test_sprite_size_range():
    sizes = [data.sprite_params(i)["size"] for i in range(200)]
    assert min(sizes) >= 18.0 and max(sizes) <= 25.0
    scaled = data.sprite_params(3, side=64)["size"]
    assert scaled == pytest.approx(2 * data.sprite_params(3)["size"])


def test_sprite_too_large_raises():
    with pytest.raises(ValueError, match="does not fit"):
        data.generate(DataConfig(n_sequences=1, sprite_px_range=(40.0, 45.0)))


def test_mass_conserved(small):
    for s in small:
        mass = s.frames.sum(axis=(1, 2))
        assert np.all(np.abs(mass - mass[0]) <= 0.02 * mass[0])


def _centroid(f):
    ys, xs = np.indices(f.shape)
    m = f.sum()
    return np.array([(xs * f).sum() / m, (ys * f).sum() / m])


def test_centroid_follows_trajectory(small):
    for s in small:
        f = s.frames
        for k in range(len(s) - 1):
            moved = _centroid(f[k + 1]) - _centroid(f[k])
            assert np.all(np.abs(moved - s.trajectory[k]) < 0.2)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 4.0), st.floats(0.0, 4.0))
def test_bilinear_place_conserves_mass_and_centroid(x, y):
    patch = data.render_sprite(data.sprite_params(5))
    a = data.place(patch, 32, x, y)
    assert a.sum() == pytest.approx(patch.sum(), rel=1e-12)
    ref = data.place(patch, 32, 0.0, 0.0)
    assert np.allclose(_centroid(a) - _centroid(ref), [x, y], atol=1e-9)


def test_save_load_round_trip(tmp_path, small):
    p = tmp_path / "d.lcds"
    data.save(small, p)
    back = data.load(p)
    assert len(back) == len(small)
    for a, b in zip(small, back):
        assert a.pixels.tobytes() == b.pixels.tobytes()
        assert a.trajectory.tobytes() == b.trajectory.tobytes()
        assert a.sprite_id == b.sprite_id


def test_file_size_arithmetic(tmp_path, small):
    p = tmp_path / "d.lcds"
    data.save(small, p)
    n_frames = len(small) * 30
    expected = data.header_size(len(small), 30) + n_frames * 32 * 32
    assert os.path.getsize(p) == expected


def test_quantisation_error_bound():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, 10_000)
    back = data.quantize(x).astype(np.float64) / 255.0
    assert np.max(np.abs(back - x)) <= 1 / 510 + 1e-15


def test_corrupted_magic(tmp_path, small):
    p = tmp_path / "d.lcds"
    data.save(small[:2], p)
    raw = bytearray(p.read_bytes())
    raw[0:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="magic"):
        data.load(p)


def test_version_mismatch(tmp_path, small):
    p = tmp_path / "d.lcds"
    data.save(small[:2], p)
    raw = bytearray(p.read_bytes())
    raw[4] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="version"):
        data.load(p)


def test_truncated(tmp_path, small):
    p = tmp_path / "d.lcds"
    data.save(small[:2], p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(DatasetFormatError):
        data.load(p)
    p.write_bytes(raw[:5])
    with pytest.raises(DatasetFormatError, match="truncated"):
        data.load(p)


def test_negatives_empty(small):
    assert data.negatives(small, RandomState(0), 0) == []


def test_negatives_separation(small):
    pairs = data.negatives(small, RandomState(1), 500)
    assert len(pairs) == 500
    for p in pairs:
        assert p.seq_a != p.seq_b
        assert p.gap >= 1


def test_negatives_single_sequence(small):
    pairs = data.negatives(small[:1], RandomState(1), 200)
    for p in pairs:
        assert p.seq_a == p.seq_b == 0
        assert p.gap >= 10


def test_negatives_deterministic(small):
    a = data.negatives(small, RandomState(3), 50)
    b = data.negatives(small, RandomState(3), 50)
    assert a == b


def test_negatives_dataset_too_small():
    short = data.generate(DataConfig(n_sequences=1, frames_per_seq=5))
    with pytest.raises(ValueError, match="too small"):
        data.negatives(short, RandomState(0), 3)
    with pytest.raises(ValueError, match="too small"):
        data.negatives([], RandomState(0), 3)


def test_pgm_round_trip(tmp_path, small):
    p = tmp_path / "f.pgm"
    data.write_pgm(p, small[0].frame(3))
    assert p.read_bytes().startswith(b"P5\n32 32\n255\n")
    back = data.read_pgm(p)
    assert np.array_equal(back, small[0].frame(3))
