"""Dataset generators, batching semantics, and CSV ingestion."""

import numpy as np
import pytest

from cdd.data import (
    ConditionalBatch,
    DataError,
    batch_iter,
    load_csv_dataset,
    make_cond_mixture,
    make_toy_sr,
    mixture_centers,
)


def test_mixture_centers_on_circle():
    centers = mixture_centers(8, 2.0)
    np.testing.assert_allclose(centers[2], [0.0, 2.0], atol=1e-12)
    centers4 = mixture_centers(4, 2.0)
    np.testing.assert_allclose(
        centers4, [[2, 0], [0, 2], [-2, 0], [0, -2]], atol=1e-12
    )
    np.testing.assert_allclose(np.linalg.norm(centers, axis=1), 2.0, atol=1e-12)


def test_mixture_shapes_and_one_hot():
    ds = make_cond_mixture(n=512, seed=0, n_components=4)
    assert ds.x.shape == (512, 2) and ds.c.shape == (512, 4)
    assert np.all(ds.c.sum(axis=1) == 1.0)
    assert np.all((ds.c == 0.0) | (ds.c == 1.0))
    assert ds.component_means.shape == (4, 2)


def test_mixture_class_conditional_means():
    ds = make_cond_mixture(n=10_000, seed=1, n_components=4, radius=2.0, noise=0.25)
    for k in range(4):
        rows = ds.x[ds.c[:, k] == 1.0]
        se = 0.25 / np.sqrt(rows.shape[0])
        assert np.all(np.abs(rows.mean(axis=0) - ds.component_means[k]) < 5 * se)


def test_mixture_mode_recovery_when_separated():
    # noise <= radius/6 keeps >99% of samples closest to their own center
    ds = make_cond_mixture(n=4000, seed=2, n_components=4, radius=2.0, noise=2.0 / 6.0)
    d = np.linalg.norm(ds.x[:, None, :] - ds.component_means[None, :, :], axis=2)
    recovered = np.argmin(d, axis=1)
    truth = np.argmax(ds.c, axis=1)
    assert np.mean(recovered == truth) > 0.99


def test_mixture_generation_is_pure():
    a = make_cond_mixture(n=64, seed=3)
    b = make_cond_mixture(n=64, seed=3)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.c, b.c)
    c = make_cond_mixture(n=64, seed=4)
    assert not np.array_equal(a.x, c.x)


def test_mixture_validation():
    with pytest.raises(DataError):
        make_cond_mixture(n=8, seed=0, n_components=1)
    with pytest.raises(DataError):
        make_cond_mixture(n=8, seed=0, noise=0.0)
    with pytest.raises(DataError):
        make_cond_mixture(n=0, seed=0)


def test_toy_sr_pooling_is_exact_without_noise():
    ds = make_toy_sr(n=100, seed=5, obs_noise=0.0)
    assert ds.x.shape == (100, 16) and ds.c.shape == (100, 4)
    np.testing.assert_allclose(ds.c, ds.x.reshape(100, 4, 4).mean(axis=2), atol=1e-15)
    assert np.max(np.abs(ds.x)) <= 1.0 + 1e-12


def test_toy_sr_condition_correlation_decays_with_noise():
    def corr(obs_noise):
        ds = make_toy_sr(n=400, seed=6, obs_noise=obs_noise)
        pooled = ds.x.reshape(400, 4, 4).mean(axis=2).ravel()
        return np.corrcoef(pooled, ds.c.ravel())[0, 1]

    c0, c_mid, c_big = corr(0.0), corr(0.2), corr(2.0)
    assert c0 > 0.999999
    assert c0 > c_mid > c_big


def test_toy_sr_validation():
    with pytest.raises(DataError):
        make_toy_sr(n=4, seed=0, length=16, pool=5)
    with pytest.raises(DataError):
        make_toy_sr(n=4, seed=0, obs_noise=-0.1)


def test_csv_round_trip(tmp_path):
    ds = make_cond_mixture(n=20, seed=7)
    path = tmp_path / "data.csv"
    rows = np.hstack([ds.x, ds.c])
    path.write_text("\n".join(",".join(format(v, ".17g") for v in row) for row in rows) + "\n")
    loaded = load_csv_dataset(path, data_dim=2, cond_dim=4)
    assert np.array_equal(loaded.x, ds.x)
    assert np.array_equal(loaded.c, ds.c)


def test_csv_errors(tmp_path):
    with pytest.raises(DataError, match="cannot read"):
        load_csv_dataset(tmp_path / "missing.csv", 2, 4)
    p = tmp_path / "short.csv"
    p.write_text("1.0,2.0,3.0\n")
    with pytest.raises(DataError, match="columns"):
        load_csv_dataset(p, 2, 4)
    p2 = tmp_path / "empty.csv"
    p2.write_text("")
    with pytest.raises(DataError):
        load_csv_dataset(p2, 2, 4)
    p3 = tmp_path / "bad.csv"
    p3.write_text("1.0,nan,3.0,4.0,5.0,6.0\n")
    with pytest.raises(DataError, match="non-finite"):
        load_csv_dataset(p3, 2, 4)


def test_batch_iter_partitions_each_epoch():
    ds = make_cond_mixture(n=64, seed=8)
    it = batch_iter(ds, batch_size=16, seed=9)
    seen = []
    for _ in range(4):  # one epoch
        batch = next(it)
        assert batch.x.shape == (16, 2) and batch.eps.shape == (16, 2)
        assert batch.t is None
        seen.append(batch.x)
    epoch = np.vstack(seen)
    assert {row.tobytes() for row in epoch} == {row.tobytes() for row in ds.x}


def test_batch_iter_deterministic_and_fresh_eps():
    ds = make_cond_mixture(n=32, seed=10)
    a = batch_iter(ds, batch_size=32, seed=11)
    b = batch_iter(ds, batch_size=32, seed=11)
    first_a, first_b = next(a), next(b)
    assert np.array_equal(first_a.x, first_b.x)
    assert np.array_equal(first_a.eps, first_b.eps)
    second_a = next(a)  # second epoch visits the same items with new noise
    assert {r.tobytes() for r in second_a.x} == {r.tobytes() for r in first_a.x}
    assert not np.array_equal(first_a.eps, second_a.eps)


def test_batch_iter_validation():
    ds = make_cond_mixture(n=8, seed=12)
    with pytest.raises(DataError):
        next(batch_iter(ds, batch_size=9, seed=0))
    with pytest.raises(DataError):
        next(batch_iter(ds, batch_size=0, seed=0))


def test_conditional_batch_shape_check():
    with pytest.raises(DataError):
        ConditionalBatch(x=np.ones((4, 2)), c=np.ones((3, 2)), eps=np.ones((4, 2)))
    with pytest.raises(DataError):
        ConditionalBatch(x=np.ones((4, 2)), c=np.ones((4, 2)), eps=np.ones((4, 3)))
