import numpy as np
import pytest
from hypothesis import given, strategies as st

from mdet3d import tensor as T
from mdet3d.backbone import (
    KERNEL_OFFSETS,
    CoordinateHash,
    PointwiseMLP,
    SparseConvLayer,
    SparseTensor,
    SparseUNet,
    effective_depth,
    pointwise_mlp_forward,
    sparse_conv,
    unet_forward,
)
from mdet3d.scene import Scene, voxelize


def random_coords(rng, n, span=6):
    pts = rng.integers(-span, span, size=(n * 3, 3))
    return np.unique(pts, axis=0)[:n]


def oracle_submanifold(coords, feats, w, b):
    """Dictionary lookup for every (voxel, offset) pair."""
    index = {tuple(c): i for i, c in enumerate(coords)}
    out = np.tile(b, (len(coords), 1))
    for o, c in enumerate(coords):
        for k, d in enumerate(KERNEL_OFFSETS):
            i = index.get(tuple(c + d))
            if i is not None:
                out[o] += feats[i] @ w[k]
    return out


def oracle_strided(coords, feats, w, b):
    coarse = sorted({tuple(np.floor_divide(c, 2)) for c in coords})
    index = {tuple(c): i for i, c in enumerate(coords)}
    out = np.tile(b, (len(coarse), 1))
    for o, q in enumerate(coarse):
        for k, d in enumerate(KERNEL_OFFSETS):
            i = index.get(tuple(2 * np.array(q) + d))
            if i is not None:
                out[o] += feats[i] @ w[k]
    return np.array(coarse), out


def make(coords, feats):
    return SparseTensor.from_coords(coords, T.Tensor(feats))


def layer(rng, cin, cout, mode):
    lay = SparseConvLayer(cin, cout, mode, rng)
    lay.bias.data[:] = rng.normal(size=cout)
    return lay


def test_hash_lookup(rng):
    coords = random_coords(rng, 200, 50)
    h = CoordinateHash(coords)
    assert np.array_equal(h.lookup(coords), np.arange(len(coords)))
    missing = coords + 1000
    assert np.all(h.lookup(missing) == -1)


def test_isolated_voxel_all_ones_kernel():
    lay = SparseConvLayer(2, 2, "submanifold", np.random.default_rng(0))
    lay.weight.data[:] = 0.0
    lay.weight.data[:, 0, 0] = lay.weight.data[:, 1, 1] = 1.0  # identity in every offset
    lay.bias.data[:] = 0.0
    out = sparse_conv(make([[3, 4, 5]], np.array([[0.5, -2.0]])), lay)
    np.testing.assert_array_equal(out.feats.data, [[0.5, -2.0]])


def test_identity_kernel(rng):
    coords = random_coords(rng, 40, 3)
    feats = rng.normal(size=(len(coords), 3))
    lay = SparseConvLayer(3, 3, "submanifold", rng)
    lay.weight.data[:] = 0.0
    lay.weight.data[13] = np.eye(3)
    lay.bias.data[:] = 0.0
    st_in = make(coords, feats)
    np.testing.assert_array_equal(sparse_conv(st_in, lay).feats.data, st_in.feats.data)


def test_strided_coordinate():
    lay = SparseConvLayer(1, 1, "strided", np.random.default_rng(0))
    assert sparse_conv(make([[2, 3, 5]], [[1.0]]), lay).coords.tolist() == [[1, 1, 2]]


def test_transposed_without_map():
    lay = SparseConvLayer(1, 1, "transposed", np.random.default_rng(0))
    with pytest.raises(ValueError, match="recorded strided"):
        sparse_conv(make([[0, 0, 0]], [[1.0]]), lay)


def test_channel_mismatch():
    lay = SparseConvLayer(3, 1, "submanifold", np.random.default_rng(0))
    with pytest.raises(T.ShapeError):
        sparse_conv(make([[0, 0, 0]], [[1.0]]), lay)


def test_duplicate_coords_rejected():
    with pytest.raises(ValueError):
        make([[0, 0, 0], [0, 0, 0]], np.zeros((2, 1)))


def test_submanifold_matches_oracle(rng):
    for _ in range(20):
        coords = random_coords(rng, 60, 4)
        st_in = make(coords, rng.normal(size=(len(coords), 3)))
        lay = layer(rng, 3, 2, "submanifold")
        out = sparse_conv(st_in, lay)
        assert np.array_equal(out.coords, st_in.coords)
        want = oracle_submanifold(st_in.coords, st_in.feats.data, lay.weight.data, lay.bias.data)
        np.testing.assert_allclose(out.feats.data, want, atol=1e-12)


def test_strided_and_transposed_match_oracle(rng):
    for _ in range(20):
        coords = random_coords(rng, 60, 5)
        st_in = make(coords, rng.normal(size=(len(coords), 3)))
        down = layer(rng, 3, 4, "strided")
        out = sparse_conv(st_in, down)
        want_c, want_f = oracle_strided(st_in.coords, st_in.feats.data, down.weight.data, down.bias.data)
        assert np.array_equal(out.coords, want_c)
        np.testing.assert_allclose(out.feats.data, want_f, atol=1e-12)
        # transposed: scatter each coarse feature back along the same pairs
        up = layer(rng, 4, 2, "transposed")
        back = sparse_conv(out, up)
        assert np.array_equal(back.coords, st_in.coords)
        fine_index = {tuple(c): i for i, c in enumerate(st_in.coords)}
        expect = np.tile(up.bias.data, (len(coords), 1))
        for o, q in enumerate(out.coords):
            for k, d in enumerate(KERNEL_OFFSETS):
                i = fine_index.get(tuple(2 * q + d))
                if i is not None:
                    expect[i] += out.feats.data[o] @ up.weight.data[k]
        np.testing.assert_allclose(back.feats.data, expect, atol=1e-12)


@pytest.mark.parametrize("mode", ["submanifold", "strided", "transposed"])
def test_sparse_conv_gradients(mode):
    rng = np.random.default_rng(3)
    for _ in range(5):
        coords = random_coords(rng, 12, 2)
        feats = rng.normal(size=(len(coords), 2))
        base = make(coords, feats)
        if mode == "transposed":
            coarse = sparse_conv(base, layer(rng, 2, 2, "strided"))
            lay = layer(rng, 2, 3, "transposed")
            pick = rng.normal(size=(len(coords), 3))

            def f(x):
                src = SparseTensor(coarse.coords, x, coarse.stride, coarse.parent, coarse.down_map)
                return T.sum(sparse_conv(src, lay).feats * T.Tensor(pick))

            x0 = coarse.feats.data
        else:
            lay = layer(rng, 2, 3, mode)
            n_out = sparse_conv(base, lay).num_active
            pick = rng.normal(size=(n_out, 3))

            def f(x):
                return T.sum(sparse_conv(SparseTensor(base.coords, x), lay).feats * T.Tensor(pick))

            x0 = feats
        assert T.grad_check(f, x0, tol=1e-4).passed
        rep = T.grad_check_params(lambda: f(T.Tensor(x0)), [lay.weight, lay.bias], tol=1e-4)
        assert rep.passed, rep.max_rel_error


@given(st.integers(0, 2**31), st.integers(-20, 20), st.integers(-20, 20), st.integers(-20, 20))
def test_submanifold_translation_equivariance(seed, dx, dy, dz):
    rng = np.random.default_rng(seed)
    coords = random_coords(rng, 30, 3)
    feats = rng.normal(size=(len(coords), 2))
    lay = layer(rng, 2, 2, "submanifold")
    a = sparse_conv(make(coords, feats), lay)
    b = sparse_conv(make(coords + [dx, dy, dz], feats), lay)
    assert np.array_equal(b.coords, a.coords + [dx, dy, dz])
    assert np.array_equal(a.feats.data, b.feats.data)
    assert b.num_active == len(coords)


def test_unet_depth_zero_is_affine():
    net = SparseUNet(6, 4, (), np.random.default_rng(1))
    pts = np.array([[0.01, 0.01, 0.01, 0.2, 0.3, 0.4]])
    out = unet_forward(voxelize(Scene(pts), 0.05), net).data
    want = pts @ net.stem.weight.data[13] + net.stem.bias.data
    np.testing.assert_allclose(out, want, atol=1e-14)


def test_unet_same_voxel_same_row(rng):
    pts = rng.uniform(0, 1, (300, 6))
    pts[1, :3] = pts[0, :3] + 1e-4
    grid = voxelize(Scene(pts), 0.05)
    assert grid.point_voxel[0] == grid.point_voxel[1]
    out = SparseUNet(rng=rng)(grid).data
    assert out.shape == (300, 16)
    assert np.array_equal(out[0], out[1])


def test_unet_gradient_five_voxels(rng):
    pts = np.c_[np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [3, 1, 2], [0, 2, 3]]) * 0.05 + 0.01, rng.random((5, 3))]
    grid = voxelize(Scene(pts), 0.05)
    net = SparseUNet(6, 3, (4, 5), rng)
    pick = rng.normal(size=(5, 3))
    f = lambda x: T.sum(net(grid, x) * T.Tensor(pick))
    assert T.grad_check(f, grid.features, tol=1e-4).passed
    rep = T.grad_check_params(lambda: f(T.Tensor(grid.features)), net.parameters(), tol=1e-4,
                              max_coords=300, rng=rng)
    assert rep.passed, rep.max_rel_error


def test_unet_depth_reduced_with_warning():
    pts = np.array([[0.0, 0, 0, 0, 0, 0], [0.06, 0, 0, 0, 0, 0]])
    grid = voxelize(Scene(pts), 0.05)
    assert effective_depth(grid.coords, 3) == 1
    with pytest.warns(RuntimeWarning, match="only 1 of 3"):
        SparseUNet()(grid)


def test_unet_deterministic(rng):
    pts = rng.uniform(0, 1, (500, 6))
    grid = voxelize(Scene(pts), 0.05)
    net = SparseUNet(rng=np.random.default_rng(5))
    a = net(grid).data
    # same voxels presented in a different point order give the same per-point rows
    perm = rng.permutation(500)
    b = net(voxelize(Scene(pts[perm]), 0.05)).data
    assert np.array_equal(a[perm], b)


def test_pointwise_constant_map():
    net = PointwiseMLP(6, 8, 5, np.random.default_rng(0))
    for _, p in net.named_parameters():
        p.data[:] = 0.0
    net.mlp.layers[-1].bias.data[:] = [1, 2, 3, 4, 5]
    out = pointwise_mlp_forward(np.random.default_rng(1).random((4, 6)), net).data
    assert np.array_equal(out, np.tile([1.0, 2, 3, 4, 5], (4, 1)))


def test_pointwise_permutation(rng):
    net = PointwiseMLP(rng=rng)
    pts = rng.random((20, 6))
    perm = rng.permutation(20)
    assert np.array_equal(net(pts).data[perm], net(pts[perm]).data)


def test_pointwise_gradient(rng):
    net = PointwiseMLP(6, 8, 4, rng)
    pts = rng.random((6, 6))
    pick = rng.normal(size=(6, 4))
    rep = T.grad_check_params(lambda: T.sum(net(pts) * T.Tensor(pick)), net.parameters(), tol=1e-5)
    assert rep.passed
