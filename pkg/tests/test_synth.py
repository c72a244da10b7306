import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import distance_transform_edt

from aggnet import netpbm
from aggnet.synth import (
    SceneSpec,
    carve_holes,
    discontinuities,
    generate_dataset,
    generate_scene,
    object_mask,
    read_split,
    sample_paths,
    write_split,
)


def test_same_seed_same_sample():
    a, b = generate_scene(SceneSpec(seed=5)), generate_scene(SceneSpec(seed=5))
    for field in ("rgb", "gt_depth", "raw_depth", "hole_mask"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    c = generate_scene(SceneSpec(seed=6))
    assert not np.array_equal(a.gt_depth, c.gt_depth)


def test_ranges():
    s = generate_scene(SceneSpec(seed=1))
    assert s.rgb.shape == (3, 64, 64) and s.gt_depth.shape == (64, 64)
    assert s.rgb.min() >= 0 and s.rgb.max() <= 1
    assert s.gt_depth.min() >= 0.5 and s.gt_depth.max() <= 10.0
    assert np.all(s.raw_depth[s.hole_mask] == 0)
    np.testing.assert_array_equal(s.raw_depth[~s.hole_mask], s.gt_depth[~s.hole_mask])


def test_zero_objects_gives_plane():
    s = generate_scene(SceneSpec(seed=3, min_objects=0, max_objects=0))
    assert s.objects == []
    g = s.gt_depth
    # a plane: constant second differences along both axes
    assert np.abs(np.diff(g, 2, axis=0)).max() < 1e-12
    assert np.abs(np.diff(g, 2, axis=1)).max() < 1e-12


def test_occlusion_is_per_pixel_min():
    for seed in range(5):
        spec = SceneSpec(seed=seed, min_objects=4, max_objects=6)
        s = generate_scene(spec)
        plane = generate_scene(SceneSpec(seed=seed, min_objects=0, max_objects=0)).gt_depth
        expected = plane.copy()
        for obj in s.objects:
            cover = object_mask(obj, 64, 64)
            expected[cover] = np.minimum(expected[cover], obj["z"])
        np.testing.assert_array_equal(s.gt_depth, expected)


def test_default_hole_fraction_near_target():
    fr = [generate_scene(SceneSpec(seed=i)).hole_mask.mean() for i in range(20)]
    assert 0.15 < np.mean(fr) < 0.25


def test_zero_fraction_keeps_gt():
    s = generate_scene(SceneSpec(seed=2, hole_fraction=0.0))
    assert not s.hole_mask.any()
    np.testing.assert_array_equal(s.raw_depth, s.gt_depth)


def test_speckle_only_tiny_probability():
    gt = generate_scene(SceneSpec(seed=0)).gt_depth
    spec = SceneSpec(seed=0, speckle_weight=1, edge_shadow_weight=0, blob_weight=0,
                     hole_fraction=1e-12)
    _, mask = carve_holes(gt, None, spec)
    assert not mask.any()


@pytest.mark.parametrize("seed", range(5))
def test_edge_shadow_holes_hug_discontinuities(seed):
    spec = SceneSpec(seed=seed, speckle_weight=0, edge_shadow_weight=1, blob_weight=0,
                     hole_fraction=0.1, shadow_radius=2)
    gt = generate_scene(spec.with_seed(seed)).gt_depth
    _, mask = carve_holes(gt, None, spec)
    edges = discontinuities(gt, spec.edge_threshold)
    if not edges.any():
        assert not mask.any()
        return
    dist = distance_transform_edt(~edges)
    assert mask.any()
    assert dist[mask].max() <= spec.shadow_radius


@pytest.mark.parametrize("kw", [dict(height=60), dict(hole_fraction=0.95),
                                dict(min_objects=3, max_objects=2), dict(depth_min=0),
                                dict(speckle_weight=0, edge_shadow_weight=0, blob_weight=0)])
def test_invalid_spec(kw):
    with pytest.raises(ValueError):
        SceneSpec(**kw)


# --- netpbm --------------------------------------------------------------------------

def test_depth_stored_in_millimetres():
    blob = netpbm.encode_pgm16(np.array([[1.234, 0.0]]))
    assert blob.startswith(b"P5\n")
    assert blob[-4:] == (1234).to_bytes(2, "big") + b"\x00\x00"


def test_round_trip_sample(tmp_path):
    s = generate_scene(SceneSpec(seed=9))
    p = tmp_path / "d.pgm"
    netpbm.write_depth(p, s.raw_depth, ["seed=9"])
    back = netpbm.read_depth(p)
    np.testing.assert_array_equal(back, netpbm.quantize_depth(s.raw_depth))
    assert np.all(back[s.hole_mask] == 0)
    depth, comments = netpbm.decode_pgm16(p.read_bytes())
    assert comments == ["seed=9"]
    q = tmp_path / "c.ppm"
    netpbm.write_rgb(q, s.rgb)
    np.testing.assert_array_equal(netpbm.read_rgb(q), np.rint(s.rgb * 255) / 255)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_mm_round_trip_exact(h, w, seed):
    mm = np.random.default_rng(seed).integers(0, 65536, size=(h, w))
    depth = mm / 1000.0
    back, _ = netpbm.decode_pgm16(netpbm.encode_pgm16(depth))
    np.testing.assert_array_equal(np.rint(back * 1000), mm)
    np.testing.assert_array_equal(back, depth)


def test_depth_out_of_range():
    with pytest.raises(ValueError):
        netpbm.encode_pgm16(np.array([[70.0]]))
    with pytest.raises(ValueError):
        netpbm.encode_pgm16(np.array([[-0.1]]))


@pytest.mark.parametrize("blob", [
    b"", b"P", b"P2\n1 1\n255\n\x00", b"P5\n", b"P5\n4\n", b"P5\nx 2\n255\n",
    b"P5\n0 2\n255\n", b"P5\n1 1\n70000\n\x00\x00", b"P5 1 1 65535", b"P6\n1 1\n255\n\x00",
])
def test_malformed_headers(blob):
    with pytest.raises(netpbm.NetpbmError):
        netpbm.decode_pgm16(blob)


def test_truncated_raster_reports_offset():
    blob = netpbm.encode_pgm16(np.ones((4, 4)))
    with pytest.raises(netpbm.NetpbmError, match="truncated") as info:
        netpbm.decode_pgm16(blob[:-3])
    assert info.value.offset == len(blob) - 3


@given(st.binary(max_size=64))
@settings(max_examples=200, deadline=None)
def test_garbage_never_crashes(blob):
    for decode in (netpbm.decode_pgm16, netpbm.decode_ppm8):
        try:
            decode(blob)
        except netpbm.NetpbmError:
            pass


def test_wrong_magic_for_kind():
    rgb = netpbm.encode_ppm8(np.zeros((3, 2, 2)))
    with pytest.raises(netpbm.NetpbmError, match="expected P5"):
        netpbm.decode_pgm16(rgb)


# --- dataset files ---------------------------------------------------------------------

def test_split_files_are_byte_reproducible(tmp_path):
    spec = SceneSpec(seed=4)
    write_split(tmp_path / "a", "train", 3, spec)
    write_split(tmp_path / "b", "train", 3, spec)
    names = sorted(os.listdir(tmp_path / "a" / "train"))
    assert names == sorted(os.listdir(tmp_path / "b" / "train"))
    assert "manifest.txt" in names and "00002_raw.pgm" in names
    for n in names:
        assert (tmp_path / "a" / "train" / n).read_bytes() == (tmp_path / "b" / "train" / n).read_bytes()


def test_read_split_matches_memory(tmp_path):
    spec = SceneSpec(seed=1)
    fractions = write_split(tmp_path, "test", 2, spec)
    assert len(fractions) == 2
    disk = read_split(tmp_path / "test")
    mem = generate_dataset(spec, "test", 2)
    np.testing.assert_array_equal(disk.seeds, mem.seeds)
    np.testing.assert_array_equal(disk.gt, netpbm.quantize_depth(mem.gt))
    np.testing.assert_array_equal(disk.raw == 0, mem.raw == 0)
    rgb_p, _, _ = sample_paths(tmp_path / "test", 1)
    assert os.path.exists(rgb_p)


def test_splits_use_different_seeds():
    a = generate_dataset(SceneSpec(), "train", 3)
    b = generate_dataset(SceneSpec(), "test", 3)
    assert not set(a.seeds.tolist()) & set(b.seeds.tolist())


def test_failed_split_is_removed(tmp_path, monkeypatch):
    import aggnet.synth as synth

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(synth.netpbm, "write_depth", boom)
    with pytest.raises(OSError):
        write_split(tmp_path, "train", 2, SceneSpec())
    assert not (tmp_path / "train").exists()
