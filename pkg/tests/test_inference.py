import numpy as np
import pytest

from dwfiber.inference import predict, predict_neighborhood, predict_voxelwise, strided_partitions, write_peaks
from dwfiber.mlp import forward, init_model
from dwfiber.synth import flatten_patches
from dwfiber.volume import Volume4D


def naive_neighborhood(model, data):
    """One forward call per voxel on its zero-padded 3x3x3 patch."""
    X, Y, Z, _ = data.shape
    padded = np.pad(data, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((X, Y, Z, model.layer_dims[-1]), dtype=np.float32)
    for i, j, k in np.ndindex(X, Y, Z):
        patch = padded[i : i + 3, j : j + 3, k : k + 3][None]
        out[i, j, k] = forward(model, flatten_patches(patch), deterministic=True)[0]
    return out


@pytest.mark.parametrize("dims", [(1, 1, 1), (2, 3, 4), (3, 3, 3), (5, 1, 7), (9, 9, 9)])
def test_partitions_cover_exactly_once(dims):
    parts = strided_partitions(dims)
    assert len(parts) == 27
    hits = np.zeros(dims, dtype=int)
    for (a, b, c), centers in parts:
        for x, y, z in centers:
            assert (x % 3, y % 3, z % 3) == (a, b, c)
            hits[x, y, z] += 1
        # patches of one partition never overlap
        cover = np.zeros(tuple(d + 2 for d in dims), dtype=int)
        for x, y, z in centers:
            cover[x : x + 3, y : y + 3, z : z + 3] += 1
        assert cover.max() <= 1
    assert np.all(hits == 1)


@pytest.mark.parametrize("dims", [(7, 6, 5), (1, 1, 1), (4, 2, 3)])
def test_strided_equals_naive(dims, rng):
    n, m = 4, 6
    model = init_model([27 * n, 16, m], seed=5)
    data = rng.normal(size=dims + (n,)).astype(np.float32)
    fast, report = predict_neighborhood(model, Volume4D(data), deterministic=True)
    np.testing.assert_array_equal(fast.data, naive_neighborhood(model, data))
    assert report.voxels == int(np.prod(dims))


def test_single_voxel_sees_zero_padding(rng):
    n = 3
    model = init_model([27 * n, 8, 5], seed=1)
    data = rng.normal(size=(1, 1, 1, n)).astype(np.float32)
    patch = np.zeros((1, 3, 3, 3, n), dtype=np.float32)
    patch[0, 1, 1, 1] = data[0, 0, 0]
    out, _ = predict_neighborhood(model, Volume4D(data), deterministic=True)
    np.testing.assert_array_equal(out.data[0, 0, 0], forward(model, flatten_patches(patch), deterministic=True)[0])


def test_voxelwise_mask_and_batches(rng):
    model = init_model([5, 7, 4], output_act="tanh", seed=2)
    data = rng.normal(size=(3, 4, 2, 5)).astype(np.float32)
    mask = rng.uniform(size=(3, 4, 2)) < 0.5
    a, rep = predict_voxelwise(model, Volume4D(data), mask, batch_voxels=3, deterministic=True)
    b, _ = predict_voxelwise(model, Volume4D(data), mask, batch_voxels=1000, deterministic=True)
    np.testing.assert_array_equal(a.data, b.data)
    assert np.all(a.data[~mask] == 0) and np.all(a.data >= 0)
    assert rep.voxels == mask.sum()
    ref = np.maximum(forward(model, data[mask], deterministic=True), 0)
    np.testing.assert_array_equal(a.data[mask], ref)


def test_mask_respected_neighborhood(rng):
    model = init_model([27 * 2, 4, 3], seed=3)
    data = rng.normal(size=(4, 4, 4, 2)).astype(np.float32)
    mask = np.zeros((4, 4, 4), dtype=bool)
    mask[1, 2, 3] = True
    out, _ = predict_neighborhood(model, Volume4D(data), mask, deterministic=True)
    full, _ = predict_neighborhood(model, Volume4D(data), deterministic=True)
    np.testing.assert_array_equal(out.data[1, 2, 3], full.data[1, 2, 3])
    assert np.count_nonzero(out.data.reshape(-1, 3).any(axis=1)) == 1


def test_channel_mismatch_and_mode():
    model = init_model([6, 4, 3], seed=0)
    with pytest.raises(ValueError):
        predict_voxelwise(model, Volume4D(np.zeros((2, 2, 2, 5))))
    with pytest.raises(ValueError):
        predict_neighborhood(model, Volume4D(np.zeros((2, 2, 2, 6))))
    with pytest.raises(ValueError):
        predict(model, Volume4D(np.zeros((2, 2, 2, 6))), "slice")


def test_write_peaks(tmp_path, small_dictionary):
    coeffs = np.zeros((2, 1, 1, small_dictionary.m), dtype=np.float32)
    coeffs[0, 0, 0, 4] = 1.0
    n = write_peaks(tmp_path / "p.txt", small_dictionary, Volume4D(coeffs))
    lines = (tmp_path / "p.txt").read_text().splitlines()
    assert n == 2 and len(lines) == 3
    fields = lines[1].split()
    assert fields[:3] == ["0", "0", "0"] and len(fields) == 7
    np.testing.assert_allclose([float(f) for f in fields[3:6]], small_dictionary.directions[4], atol=1e-6)
    assert lines[2].split() == ["1", "0", "0"]
