import numpy as np
import pytest
from hypothesis import given, strategies as st

from radarsparse.grid import DenseGrid, GridSpec, SparseGrid, to_dense
from radarsparse.nn import Parameter, grad_check
from radarsparse.sparse_conv import (
    ConvSpec, SparseConv, build_rulebook, dc_forward, dense_conv_oracle, dense_deconv_oracle,
    footprint_occupancy, sc_forward, ssc_forward,
)

from conftest import random_grid


def naive_conv(x, W, b, f, s):
    """Hand-unrolled zero-padded cross-correlation."""
    nx, ny, _ = x.shape
    p = (f - 1) // 2
    ox, oy = nx // s, ny // s
    out = np.zeros((ox, oy, len(b)))
    for bi in range(ox):
        for bj in range(oy):
            acc = b.copy()
            k = 0
            for di in range(-p, f - p):
                for dj in range(-p, f - p):
                    i, j = s * bi + di, s * bj + dj
                    if 0 <= i < nx and 0 <= j < ny:
                        acc = acc + W[k] @ x[i, j]
                    k += 1
            out[bi, bj] = acc
    return out


def brute_pairs(cells, nx, ny, f):
    """(di, dj, in cell, out cell) by looping over output cells and offsets."""
    active = set(map(tuple, cells.tolist()))
    p = (f - 1) // 2
    out = set()
    for (i, j) in active:
        for di in range(-p, f - p):
            for dj in range(-p, f - p):
                if (i + di, j + dj) in active:
                    out.add((di, dj, i + di, j + dj, i, j))
    return out


def deconv_matrix(layer, fine_spec, coarse_spec):
    """Explicit transpose of the strided convolution's dense linear map."""
    W = layer.weight.value
    n_out, m_in = W.shape[1], W.shape[2]
    f, s = layer.spec.f, layer.spec.s
    p = (f - 1) // 2
    fx, fy = fine_spec.shape
    cx, cy = coarse_spec.shape
    T = np.zeros((fx * fy * n_out, cx * cy * m_in))
    for bi in range(cx):
        for bj in range(cy):
            k = 0
            for di in range(-p, f - p):
                for dj in range(-p, f - p):
                    i, j = s * bi + di, s * bj + dj
                    if 0 <= i < fx and 0 <= j < fy:
                        r = (i * fy + j) * n_out
                        c = (bi * cy + bj) * m_in
                        T[r:r + n_out, c:c + m_in] += W[k]
                    k += 1
    return T


def test_conv_spec_validation():
    with pytest.raises(ValueError):
        ConvSpec(0, 1, 3)
    with pytest.raises(ValueError):
        SparseConv(1, 1, f=2, s=1)
    with pytest.raises(ValueError):
        SparseConv(1, 1, f=3, s=2, mode="submanifold")
    assert ConvSpec(1, 1, 3).offsets()[0] == (-1, -1) and ConvSpec(1, 1, 2, 2).offsets() == [
        (0, 0), (0, 1), (1, 0), (1, 1)]


def test_rulebook_examples():
    spec = GridSpec(0, 8, 0, 8, 1.0)
    rb = build_rulebook([(3, 3)], spec, ConvSpec(1, 1, 3))
    assert rb.pairs() == {(0, 0, 3, 3, 3, 3)}
    rb = build_rulebook([(3, 3), (4, 4)], spec, ConvSpec(1, 1, 3))
    assert rb.num_pairs == 4
    assert {p[4:] for p in rb.pairs()} == {(3, 3), (4, 4)}
    with pytest.raises(ValueError):
        build_rulebook([(3, 3)], spec, ConvSpec(1, 1, 2, 2), "deconv")


def test_rulebook_vs_brute_force(rng):
    g = random_grid(rng, 32, 32, density=0.2, channels=1)
    rb = build_rulebook(g.indices, g.spec, ConvSpec(1, 1, 3))
    assert rb.pairs() == brute_pairs(g.indices, 32, 32, 3)


@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 20), st.sampled_from([1, 3, 5]))
def test_rulebook_property(seed, nx, ny, f):
    r = np.random.default_rng(seed)
    g = random_grid(r, nx, ny, density=r.uniform(0, 1), channels=1)
    rb = build_rulebook(g.indices, g.spec, ConvSpec(1, 1, f))
    assert rb.pairs() == brute_pairs(g.indices, nx, ny, f)


def test_ssc_identity_and_locality():
    spec = GridSpec(0, 8, 0, 8, 1.0)
    layer = SparseConv(2, 2, 3)
    layer.weight.value[:] = 0
    layer.weight.value[4] = np.eye(2)
    layer.bias.value[:] = 0
    g = SparseGrid(spec, [(1, 1), (2, 2), (6, 6)], [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    out = ssc_forward(layer, g)
    assert out.same_active(g)
    np.testing.assert_array_equal(out.features, g.features)
    layer = SparseConv(2, 3, 3, seed=3)
    far = ssc_forward(layer, SparseGrid(spec, [(1, 1), (6, 6)], [[1.0, 2.0], [5.0, 6.0]]))
    alone = ssc_forward(layer, SparseGrid(spec, [(1, 1)], [[1.0, 2.0]]))
    np.testing.assert_array_equal(far.features[0], alone.features[0])
    with pytest.raises(ValueError):
        ssc_forward(layer, SparseGrid(spec, [(1, 1)], [[1.0]]))


def test_ssc_matches_dense_oracle(rng):
    for _ in range(10):
        g = random_grid(rng, 16, 16, density=0.2, channels=3)
        layer = SparseConv(3, 4, 3, seed=rng)
        out = ssc_forward(layer, g)
        ref = dense_conv_oracle(to_dense(g), layer).features[g.indices[:, 0], g.indices[:, 1]]
        np.testing.assert_allclose(out.features, ref, rtol=1e-10, atol=1e-12)


def test_sc_examples():
    spec = GridSpec(0, 16, 0, 16, 1.0)
    out = sc_forward(SparseConv(1, 1, 3, 1, "strided"), SparseGrid(spec, [(5, 5)], [[1.0]]))
    assert len(out) == 9
    out = sc_forward(SparseConv(1, 1, 2, 2, "strided"), SparseGrid(spec, [(5, 7)], [[1.0]]))
    assert out.indices.tolist() == [[2, 3]] and out.spec.shape == (8, 8)
    with pytest.raises(ValueError):
        sc_forward(SparseConv(1, 1, 2, 2, "strided"), SparseGrid.empty(GridSpec(0, 5, 0, 4, 1.0), 1))


@pytest.mark.parametrize("f,s", [(2, 2), (3, 2), (3, 1)])
def test_sc_matches_dense_oracle(f, s, rng):
    for _ in range(5):
        g = random_grid(rng, 16, 12, density=rng.uniform(0.05, 0.5), channels=2)
        layer = SparseConv(2, 3, f, s, "strided", seed=rng)
        out = sc_forward(layer, g)
        mask = footprint_occupancy(g.spec, g.indices, layer.spec)
        assert out.indices.tolist() == np.argwhere(mask).tolist()
        ref = dense_conv_oracle(to_dense(g), layer).features[mask]
        np.testing.assert_allclose(out.features, ref, rtol=1e-10, atol=1e-12)


def test_dc_examples():
    spec = GridSpec(0, 8, 0, 8, 1.0)
    g = SparseGrid(spec, [(2, 2), (2, 3), (3, 3)], [[1.0], [2.0], [3.0]])
    sc = SparseConv(1, 2, 2, 2, "strided", seed=1)
    dc = SparseConv(2, 1, 2, 2, "deconv", seed=2)
    coarse = sc_forward(sc, g)
    assert len(coarse) == 1
    out = dc_forward(dc, coarse, g)
    assert out.same_active(g)
    W, b, c = dc.weight.value, dc.bias.value, coarse.features[0]
    # fine cells (2,2), (2,3), (3,3) sit at offsets (0,0), (0,1), (1,1) of the window
    expected = [W[k] @ c + b for k in (0, 1, 3)]
    np.testing.assert_allclose(out.features, expected)
    with pytest.raises(ValueError):
        dc.forward(coarse)
    with pytest.raises(ValueError):
        dc_forward(dc, coarse, SparseGrid(spec, [(6, 6)], [[1.0]]))


def test_dc_matches_transposed_matrix(rng):
    for f in (2, 3):
        g = random_grid(rng, 8, 8, density=0.3, channels=1)
        sc = SparseConv(1, 2, f, 2, "strided", seed=0)
        coarse = sc_forward(sc, g)
        dc = SparseConv(2, 3, f, 2, "deconv", seed=rng)
        out = dc_forward(dc, coarse, g)
        assert out.same_active(g)
        T = deconv_matrix(dc, g.spec, coarse.spec)
        y = (T @ to_dense(coarse).features.reshape(-1)).reshape(8, 8, 3) + dc.bias.value
        np.testing.assert_allclose(out.features, y[g.indices[:, 0], g.indices[:, 1]], rtol=1e-10, atol=1e-12)
        ref = dense_deconv_oracle(to_dense(coarse), dc, g.spec).features
        np.testing.assert_allclose(ref, y, rtol=1e-10, atol=1e-12)


def test_dense_oracle_examples(rng):
    spec = GridSpec(0, 8, 0, 8, 1.0)
    x = rng.normal(size=(8, 8, 2))
    W = np.zeros((9, 2, 2))
    W[4] = np.eye(2)
    np.testing.assert_array_equal(dense_conv_oracle(DenseGrid(spec, x), (W, np.zeros(2), ConvSpec(2, 2, 3))).features, x)
    one = np.zeros((8, 8, 1))
    one[4, 4] = 1
    out = dense_conv_oracle(DenseGrid(spec, one), (np.ones((9, 1, 1)), np.zeros(1), ConvSpec(1, 1, 3))).features
    assert out.sum() == 9 and out[3:6, 3:6].min() == 1
    for f, s in [(3, 2), (3, 1), (2, 2), (5, 1)]:
        W, b = rng.normal(size=(f * f, 3, 2)), rng.normal(size=3)
        got = dense_conv_oracle(DenseGrid(spec, x), (W, b, ConvSpec(2, 3, f, s))).features
        np.testing.assert_allclose(got, naive_conv(x, W, b, f, s), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mode,f,s", [("submanifold", 3, 1), ("strided", 2, 2), ("strided", 3, 1), ("deconv", 2, 2)])
def test_conv_grad(mode, f, s, rng):
    g = random_grid(rng, 8, 8, density=0.4, channels=2)
    ref = None
    if mode == "deconv":
        ref = g
        g = sc_forward(SparseConv(2, 2, f, s, "strided"), g)
    layer = SparseConv(2, 3, f, s, mode, seed=1)
    xp = Parameter(g.features.copy())
    R = None

    def closure():
        nonlocal R
        y = layer.forward(g.with_features(xp.value), ref)
        if R is None:
            R = rng.normal(size=y.features.shape)
        xp.grad += layer.backward(R)
        return float((R * y.features).sum())

    params = dict(layer.named_parameters())
    params["input"] = xp
    report = grad_check(closure, params, tolerance=1e-5, max_coords=64)
    assert report.passed, report


def test_mac_counts(rng):
    g = random_grid(rng, 16, 16, density=0.2, channels=3)
    layer = SparseConv(3, 4, 3)
    ssc_forward(layer, g)
    assert layer.macs == layer.pairs * 12 < layer.dense_macs == 16 * 16 * 9 * 12
    ii, jj = np.meshgrid(range(16), range(16), indexing="ij")
    full = SparseGrid(g.spec, np.column_stack([ii.ravel(), jj.ravel()]), np.ones((256, 3)))
    ssc_forward(layer, full)
    # border offsets fall off the grid, so the bound is met only in the interior
    assert layer.macs == (16 * 16 * 9 - 4 * 16 * 3 + 4) * 12
