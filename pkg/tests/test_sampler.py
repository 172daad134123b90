import numpy as np
import pytest

from flowguide.core import DomainError, SeededRng, TimeGrid, lerp_path, sample_gaussian
from flowguide.fields import OracleField
from flowguide.sampler import (euler_step, latent_prediction, load_trace, sample, save_trace,
                               trace_montage, visualize_trace)
from flowguide.toy_world import decode

from conftest import tiny_dataset


def test_latent_prediction_basic():
    z = np.arange(4, dtype=np.float32).reshape(1, 2, 2, 1)
    assert np.array_equal(latent_prediction(z, np.zeros_like(z), 0.7), z)
    with pytest.raises(DomainError):
        latent_prediction(z, z, 1.5)


def test_telescoping_on_exact_linear_path():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z0, z1 = rng.normal(size=(2, 2, 3, 3, 1))
        t = rng.uniform()
        np.testing.assert_allclose(latent_prediction(lerp_path(z0, z1, t), z1 - z0, t), z0, atol=1e-12)


def test_single_item_prediction_is_item(single_item):
    ds, f = single_item
    z = sample_gaussian(ds.latent_shape, SeededRng(0, 0))
    for t in (1.0, 0.3, 0.02):
        np.testing.assert_allclose(latent_prediction(z, f.eval(z, t), t), ds.latents[0], atol=1e-6)


def test_euler_step():
    z = np.ones((1, 1, 2, 1), np.float32)
    assert np.array_equal(euler_step(z, np.zeros_like(z), 0.1), z)
    with pytest.raises(DomainError):
        euler_step(z, z, 0.0)


@pytest.mark.parametrize("steps", [1, 2, 50])
def test_single_item_sampling_is_exact(single_item, steps):
    ds, f = single_item
    z1 = sample_gaussian(ds.latent_shape, SeededRng(steps, 0))
    z0, trace = sample(f, z1, TimeGrid(steps))
    np.testing.assert_allclose(z0, ds.latents[0], atol=1e-5)
    assert f.eval_count == steps
    assert len(trace) == steps + 1


def test_eval_counts_with_cfg(single_item):
    ds, f = single_item
    z1 = sample_gaussian(ds.latent_shape, SeededRng(0, 0))
    _, trace = sample(f, z1, TimeGrid(10), cfg_scale=6.0, condition=0)
    assert f.eval_count == 20
    counts = trace.eval_counts
    assert counts == sorted(counts) and counts[-1] == 20
    assert [r.evals for r in trace.records[:-1]] == [2 * (k + 1) for k in range(10)]


def test_never_evaluates_at_zero(single_item):
    ds, f = single_item
    seen = []
    original = f._velocity
    f._velocity = lambda z, t, c: seen.append(t) or original(z, t, c)
    sample(f, np.zeros(ds.latent_shape, np.float32), TimeGrid(5))
    assert min(seen) == pytest.approx(0.2)


def test_two_item_flow_lands_on_items():
    rng = np.random.default_rng(0)
    items = rng.normal(size=(2, 8))
    ds = tiny_dataset(items)
    f = OracleField(ds)
    hits = 0
    for seed in range(100):
        z0, _ = sample(f, sample_gaussian(ds.latent_shape, SeededRng(seed, 0)), TimeGrid(50), trace=False)
        hits += min(np.abs(z0.ravel() - x).max() for x in items) < 1e-2
    assert hits >= 95


def test_sampling_is_deterministic(single_item):
    ds, f = single_item
    z1 = sample_gaussian(ds.latent_shape, SeededRng(3, 0))
    a, _ = sample(f, z1, TimeGrid(7))
    b, _ = sample(f, z1, TimeGrid(7))
    assert a.tobytes() == b.tobytes()


def test_montage_layout_and_final_step(single_item):
    ds, f = single_item
    z0, trace = sample(f, sample_gaussian(ds.latent_shape, SeededRng(1, 0)), TimeGrid(6))
    frames, h, w = ds.video_shape
    m = trace_montage(trace, decode)
    assert m.shape == (7 * h + 6, frames * w + frames - 1)
    strips = visualize_trace(trace, decode)
    final = decode(z0)
    for k in range(frames):
        np.testing.assert_array_equal(strips[-1][:, k * (w + 1):k * (w + 1) + w], final[k])
    with pytest.raises(ValueError):
        visualize_trace(type(trace)(), decode)


def test_trace_save_load(tmp_path, single_item):
    ds, f = single_item
    _, trace = sample(f, sample_gaussian(ds.latent_shape, SeededRng(1, 0)), TimeGrid(3))
    save_trace(tmp_path, trace)
    back = load_trace(tmp_path)
    assert len(back) == len(trace)
    for a, b in zip(trace.records, back.records):
        assert a.step == b.step and a.t == b.t and a.evals == b.evals
        assert a.z.tobytes() == b.z.tobytes()
        assert a.z0_hat.tobytes() == b.z0_hat.tobytes()
