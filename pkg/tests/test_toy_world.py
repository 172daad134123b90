import json
import math

import numpy as np
import pytest

from flowguide.formats import to_u8
from flowguide.metrics import centroid_track
from flowguide.toy_world import (AppearanceClass, GeometryError, IdentityCodec, PooledCodec, Trajectory,
                                 build_dataset, disk_coverage, load_dataset, render_video, save_dataset,
                                 square_coverage)

DISK = AppearanceClass(0, "disk", 3.0, 1.0)
SQUARE = AppearanceClass(1, "square", 3.0, 0.8)


def test_disk_coverage_matches_supersampling():
    # independent oracle: 64x64 point samples per pixel
    cx, cy, r = 7.3, 6.85, 3.4
    cov = disk_coverage(cx, cy, r, 14, 14)
    n = 64
    offs = (np.arange(n) + 0.5) / n
    brute = np.zeros((14, 14))
    for i in range(14):
        for j in range(14):
            ys, xs = np.meshgrid(i + offs, j + offs, indexing="ij")
            brute[i, j] = np.mean((xs - cx) ** 2 + (ys - cy) ** 2 <= r * r)
    assert np.abs(cov - brute).max() < 2e-3
    assert cov.sum() == pytest.approx(math.pi * r * r, rel=1e-9)


def test_square_coverage_area():
    cov = square_coverage(5.25, 4.6, 2.0, 12, 12)
    assert cov.sum() == pytest.approx(16.0)
    assert cov.max() == 1.0


def test_static_video_frames_identical_and_deterministic():
    traj = Trajectory("linear", (16.0, 16.0), (0.0, 0.0))
    v = render_video(DISK, traj, 8, 32, 32)
    assert v.shape == (8, 32, 32)
    assert all(np.array_equal(v[0], f) for f in v)
    assert render_video(DISK, traj, 8, 32, 32).tobytes() == v.tobytes()


@pytest.mark.parametrize("appearance", [DISK, SQUARE, AppearanceClass(2, "ring", 4.0, 1.0)])
def test_centroid_within_half_pixel_on_subpixel_grid(appearance):
    worst = 0.0
    for ox in np.linspace(0, 1, 5, endpoint=False):
        for oy in np.linspace(0, 1, 5, endpoint=False):
            traj = Trajectory("linear", (10.0 + ox, 11.0 + oy), (1.3, 0.7))
            track = centroid_track(render_video(appearance, traj, 6, 32, 32)).positions
            worst = max(worst, np.abs(track - traj.positions(6)).max())
    assert worst < 0.5


def test_trajectory_kinds_and_json():
    for traj in (Trajectory("circular", (16, 16), radius=5, omega=0.5, phase=0.2),
                 Trajectory("sinusoidal", (8, 16), (2.0, 0.0), omega=1.0, amplitude=3.0)):
        again = Trajectory.from_dict(json.loads(json.dumps(traj.to_dict())))
        np.testing.assert_array_equal(again.positions(8), traj.positions(8))
    circ = Trajectory("circular", (16, 16), radius=5, omega=0.5).positions(8)
    np.testing.assert_allclose(np.hypot(circ[:, 0] - 16, circ[:, 1] - 16), 5.0)


def test_geometry_errors():
    with pytest.raises(GeometryError):
        render_video(AppearanceClass(0, "disk", 10.0, 1.0), Trajectory("linear", (8, 8), (0, 0)), 2, 16, 16)
    with pytest.raises(GeometryError):
        render_video(DISK, Trajectory("linear", (4, 8), (-2, 0)), 8, 16, 16)
    with pytest.raises(ValueError):
        AppearanceClass(0, "disk", 0.5, 1.0)


def test_identity_codec():
    v = render_video(DISK, Trajectory("linear", (10, 10), (1, 1)), 4, 24, 24)
    c = IdentityCodec()
    z = c.encode(v)
    assert z.shape == (4, 24, 24, 1)
    back = c.decode(z)
    # float32 cannot hold 2p-1 for every p exactly; agreement is at rounding level and exact in 8 bits
    assert np.abs(back - v).max() <= 2.0 ** -24
    assert np.array_equal(to_u8(back), to_u8(v))
    dyadic = np.arange(9, dtype=np.float32).reshape(1, 3, 3) / 8
    assert np.array_equal(c.decode(c.encode(dyadic)), dyadic)
    assert not np.any(c.encode(np.full((2, 4, 4), 0.5)))


def test_pooled_codec_block_average():
    v = np.random.default_rng(0).uniform(size=(2, 8, 8)).astype(np.float32)
    c = PooledCodec()
    back = c.decode(c.encode(v))
    brute = np.zeros_like(v)
    for f in range(2):
        for i in range(0, 8, 2):
            for j in range(0, 8, 2):
                brute[f, i:i + 2, j:j + 2] = v[f, i:i + 2, j:j + 2].mean()
    np.testing.assert_allclose(back, brute, atol=1e-6)
    np.testing.assert_allclose(c.encode(back), c.encode(v), atol=1e-6)


def test_build_dataset_counting_and_shapes():
    trajs = [Trajectory("linear", (12, 12), (d, 0)) for d in (-1, 0, 1, 0.5)]
    ds = build_dataset([(cls, t) for cls in (DISK, SQUARE) for t in trajs], 4, 24, 24)
    assert len(ds) == 8
    assert ds.labels.tolist() == [0] * 4 + [1] * 4
    assert ds.latents.shape == (8, 4, 24, 24, 1)
    assert len(build_dataset([(DISK, trajs[0])], 4, 24, 24)) == 1


def test_duplicate_items_warn():
    t = Trajectory("linear", (12, 12), (0, 0))
    with pytest.warns(UserWarning):
        ds = build_dataset([(DISK, t), (DISK, t)], 2, 24, 24)
    assert len(ds) == 2


def test_dataset_save_load_roundtrip(tmp_path):
    trajs = [Trajectory("linear", (12, 12), (1, 0)), (Trajectory("linear", (6, 12), (0, 1)),
                                                      Trajectory("linear", (18, 12), (0, -1)))]
    ds = build_dataset([(DISK, trajs[0]), (SQUARE, trajs[1])], 4, 24, 24)
    path = save_dataset(tmp_path, ds)
    manifest = json.loads(path.read_text())
    assert [it["class_id"] for it in manifest["items"]] == [0, 1]
    assert all({"file", "class_id", "trajectory"} <= set(it) for it in manifest["items"])
    back = load_dataset(path)
    assert back.latents.tobytes() == ds.latents.tobytes()
    assert back.classes == ds.classes
    np.testing.assert_array_equal(back.motions[1][1].positions(4), trajs[1][1].positions(4))
