import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from maskvol.errors import OutOfBounds, OutOfImage, ShapeMismatch, ValidationError
from maskvol.geometry import Aabb, CameraRig, look_at_view, project_points
from maskvol.voxelgrid import (
    DepthBins,
    FeatureVolume,
    ImageFeatureMap,
    VoxelSpec,
    bilinear_sample,
    conv3d_same,
    depth_distribution,
    lift_image_features,
    occupancy,
    projection_layer,
    trilinear_sample,
    trilinear_sample_grad,
    voxelize_points,
)

BOUNDS = Aabb(np.array([-2.0, -1.0, 0.0]), np.array([2.0, 3.0, 1.5]))


def spec(res=(5, 4, 3), c=2, bounds=BOUNDS):
    return VoxelSpec(res, bounds, c)


def interior_points(sp, rng, n):
    lo = sp.bounds.min + 0.5 * sp.voxel_size
    hi = sp.bounds.max - 0.5 * sp.voxel_size
    return rng.uniform(lo, hi, (n, 3))


def test_spec_validation():
    with pytest.raises(ValidationError):
        VoxelSpec((1, 4, 4), BOUNDS, 2)
    with pytest.raises(ValidationError):
        VoxelSpec((4, 4, 4), BOUNDS, 0)
    np.testing.assert_allclose(spec().voxel_size, [0.8, 1.0, 0.5])


def test_volume_shape_checked():
    with pytest.raises(ShapeMismatch):
        FeatureVolume(spec(), torch.zeros(5, 4, 3, 3))


def test_trilinear_at_voxel_centres_is_exact():
    sp = spec()
    vol = FeatureVolume(sp, torch.randn(5, 4, 3, 2))
    c = torch.from_numpy(sp.centers().reshape(-1, 3))
    assert torch.equal(trilinear_sample(vol, c), vol.data.reshape(-1, 2))


def test_trilinear_centroid_is_mean_of_eight():
    sp = spec()
    vol = FeatureVolume(sp, torch.randn(5, 4, 3, 2))
    centers = sp.centers()
    p = centers[1:3, 1:3, 0:2].reshape(-1, 3).mean(axis=0)
    expected = vol.data[1:3, 1:3, 0:2].reshape(-1, 2).mean(dim=0)
    torch.testing.assert_close(trilinear_sample(vol, p), expected, rtol=0, atol=1e-14)


def test_trilinear_linear_field(rng):
    sp = spec(c=1)
    vol = FeatureVolume.from_function(sp, lambda p: (2 * p[..., 0] + 3 * p[..., 1] - p[..., 2])[..., None])
    p = interior_points(sp, rng, 200)
    got = trilinear_sample(vol, p)[:, 0].numpy()
    np.testing.assert_allclose(got, 2 * p[:, 0] + 3 * p[:, 1] - p[:, 2], rtol=0, atol=1e-10)
    _, jac = trilinear_sample_grad(vol, p)
    np.testing.assert_allclose(jac[:, 0].numpy(), np.tile([2.0, 3.0, -1.0], (200, 1)), rtol=0, atol=1e-10)


def test_trilinear_out_of_bounds():
    vol = FeatureVolume.zeros(spec())
    with pytest.raises(OutOfBounds):
        trilinear_sample(vol, [2.1, 0.0, 0.5])
    # inside the tolerance band
    trilinear_sample(vol, [2.0 + 5e-10, 0.0, 0.5])


def test_trilinear_border_band_is_constant():
    sp = spec()
    vol = FeatureVolume(sp, torch.randn(5, 4, 3, 2))
    inner = sp.centers()[0, 0, 0]
    corner = sp.bounds.min
    torch.testing.assert_close(trilinear_sample(vol, corner), trilinear_sample(vol, inner))
    _, jac = trilinear_sample_grad(vol, corner + 1e-3)
    assert torch.count_nonzero(jac) == 0


def test_constant_field_zero_jacobian(rng):
    sp = spec()
    vol = FeatureVolume(sp, torch.full((5, 4, 3, 2), 3.5))
    _, jac = trilinear_sample_grad(vol, interior_points(sp, rng, 20))
    assert float(jac.abs().max()) < 1e-14


def test_jacobian_matches_finite_differences(rng):
    sp = spec(c=3)
    vol = FeatureVolume(sp, torch.randn(5, 4, 3, 3))
    eps = 1e-5 * sp.voxel_size
    checked = 0
    for p in interior_points(sp, rng, 200):
        g = (p - sp.bounds.min) / sp.voxel_size - 0.5
        frac = g - np.floor(g)
        if np.any(np.minimum(frac, 1 - frac) < 1e-3):
            continue  # too close to a cell boundary
        _, jac = trilinear_sample_grad(vol, p)
        for a in range(3):
            e = np.zeros(3)
            e[a] = eps[a]
            fd = (trilinear_sample(vol, p + e) - trilinear_sample(vol, p - e)) / (2 * eps[a])
            torch.testing.assert_close(jac[:, a], fd, rtol=1e-6, atol=1e-9)
        checked += 1
    assert checked > 100


def test_jacobian_agrees_with_autograd(rng):
    sp = spec(c=2)
    vol = FeatureVolume(sp, torch.randn(5, 4, 3, 2))
    p = torch.from_numpy(interior_points(sp, rng, 1)[0]).requires_grad_(True)
    _, jac = trilinear_sample_grad(vol, p.detach())
    auto = torch.autograd.functional.jacobian(lambda q: trilinear_sample(vol, q), p)
    torch.testing.assert_close(jac, auto, rtol=1e-12, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_trilinear_exact_on_cellwise_trilinear_fields(seed):
    # random coefficients for a single global trilinear polynomial
    rng = np.random.default_rng(seed)
    sp = spec(c=1)
    a = rng.normal(size=8)

    def field(p):
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        return a[0] + a[1] * x + a[2] * y + a[3] * z + a[4] * x * y + a[5] * y * z + a[6] * x * z + a[7] * x * y * z

    vol = FeatureVolume.from_function(sp, lambda p: field(p)[..., None])
    p = interior_points(sp, rng, 20)
    np.testing.assert_allclose(trilinear_sample(vol, p)[:, 0].numpy(), field(p), rtol=0, atol=1e-10)


def test_bilinear_examples(rng):
    data = torch.randn(1, 6, 8, 2)
    fmap = ImageFeatureMap(data)
    assert torch.equal(bilinear_sample(fmap, 0, [3.5, 2.5]), data[0, 2, 3])
    expected = data[0, 2:4, 3:5].reshape(-1, 2).mean(0)
    torch.testing.assert_close(bilinear_sample(fmap, 0, [4.0, 3.0]), expected, rtol=0, atol=1e-14)
    yy, xx = np.meshgrid(np.arange(6) + 0.5, np.arange(8) + 0.5, indexing="ij")
    lin = torch.from_numpy((1.5 * xx - 0.5 * yy + 2)[None, ..., None])
    uv = np.stack([rng.uniform(0.5, 7.5, 100), rng.uniform(0.5, 5.5, 100)], axis=-1)
    got = bilinear_sample(ImageFeatureMap(lin), 0, uv)[:, 0].numpy()
    np.testing.assert_allclose(got, 1.5 * uv[:, 0] - 0.5 * uv[:, 1] + 2, rtol=0, atol=1e-10)
    with pytest.raises(OutOfImage):
        bilinear_sample(fmap, 0, [8.5, 1.0])


def test_bilinear_stride():
    data = torch.randn(1, 3, 4, 1)
    fmap = ImageFeatureMap(data, stride=2)
    assert torch.equal(bilinear_sample(fmap, 0, [3.0, 1.0]), data[0, 0, 1])


# lifting ----------------------------------------------------------------


def lift_setup(H=16, W=16, C=3):
    bounds = Aabb(np.array([-2.0, -2.0, 0.0]), np.array([2.0, 2.0, 2.0]))
    sp = VoxelSpec((8, 8, 4), bounds, C)
    cam = look_at_view([-3.0, 0.0, 1.0], [1.0, 0.0, 0.0], fx=12.0, fy=12.0, cx=W / 2, cy=H / 2)
    rig = CameraRig((cam,), (H, W))
    bins = DepthBins(0.5, 8.0, 16)
    return sp, rig, bins


def test_lift_uniform_distribution():
    sp, rig, bins = lift_setup()
    fmap = ImageFeatureMap(torch.full((1, 16, 16, 3), 2.0))
    dist = torch.full((1, 16, 16, bins.count), 1.0 / bins.count)
    vol = lift_image_features(fmap, rig, sp, dist, bins)
    _, depth, valid = project_points(sp.centers().reshape(-1, 3), rig, 0)
    seen = valid & (depth >= bins.d_min) & (depth <= bins.d_max)
    flat = vol.data.reshape(-1, 3)
    assert seen.sum() > 10 and (~seen).sum() > 10
    torch.testing.assert_close(flat[torch.from_numpy(seen)], torch.full((int(seen.sum()), 3), 2.0 / bins.count))
    assert torch.count_nonzero(flat[torch.from_numpy(~seen)]) == 0


def test_lift_behind_camera_is_zero():
    sp, rig, bins = lift_setup()
    cam = look_at_view([-3.0, 0.0, 1.0], [-1.0, 0.0, 0.0], fx=12.0, fy=12.0, cx=8, cy=8)
    rig = CameraRig((cam,), (16, 16))
    fmap = ImageFeatureMap(torch.ones(1, 16, 16, 3))
    dist = torch.full((1, 16, 16, bins.count), 1.0 / bins.count)
    assert torch.count_nonzero(lift_image_features(fmap, rig, sp, dist, bins).data) == 0


def test_lift_one_hot_matches_brute_force(rng):
    sp, rig, bins = lift_setup()
    fmap = ImageFeatureMap(torch.from_numpy(rng.normal(size=(1, 16, 16, 3))))
    centers = sp.centers().reshape(-1, 3)
    px, depth, valid = project_points(centers, rig, 0)
    # one depth bin, hot everywhere: voxels whose depth hits that bin centre get weight 1
    k = 6
    dist = torch.zeros(1, 16, 16, bins.count)
    dist[..., k] = 1.0
    vol = lift_image_features(fmap, rig, sp, dist, bins).data.reshape(-1, 3)
    spacing = (bins.d_max - bins.d_min) / (bins.count - 1)
    for i, p in enumerate(centers):
        if not (valid[i] and bins.d_min <= depth[i] <= bins.d_max):
            assert torch.count_nonzero(vol[i]) == 0
            continue
        b = (depth[i] - bins.d_min) / spacing
        w = max(0.0, 1.0 - abs(b - k))  # hat function of the interpolated bin coordinate
        feat = bilinear_sample(fmap, 0, np.clip(px[i], 0.5, 15.5))
        torch.testing.assert_close(vol[i], feat * w, rtol=1e-12, atol=1e-12)


def test_lift_is_linear_in_features(rng):
    sp, rig, bins = lift_setup()
    f1 = torch.from_numpy(rng.normal(size=(1, 16, 16, 3)))
    f2 = torch.from_numpy(rng.normal(size=(1, 16, 16, 3)))
    dist = torch.softmax(torch.from_numpy(rng.normal(size=(1, 16, 16, bins.count))), -1)
    lift = lambda f: lift_image_features(ImageFeatureMap(f), rig, sp, dist, bins).data  # noqa: E731
    torch.testing.assert_close(lift(2.0 * f1 - 0.5 * f2), 2.0 * lift(f1) - 0.5 * lift(f2), rtol=0, atol=1e-10)


def test_lift_averages_views():
    sp, rig, bins = lift_setup()
    rig2 = CameraRig(rig.views * 2, rig.image_size)
    fmap = ImageFeatureMap(torch.cat([torch.full((1, 16, 16, 3), 1.0), torch.full((1, 16, 16, 3), 3.0)]))
    dist = torch.full((2, 16, 16, bins.count), 1.0 / bins.count)
    vol = lift_image_features(fmap, rig2, sp, dist, bins).data.reshape(-1, 3)
    nz = vol[vol.abs().sum(-1) > 0]
    torch.testing.assert_close(nz, torch.full_like(nz, 2.0 / bins.count))


def test_depth_distribution_normalised(rng):
    fmap = ImageFeatureMap(torch.from_numpy(rng.normal(size=(2, 4, 5, 3))))
    d = depth_distribution(fmap, torch.randn(7, 3), torch.randn(7))
    assert d.shape == (2, 4, 5, 7)
    torch.testing.assert_close(d.sum(-1), torch.ones(2, 4, 5))


# voxelization -----------------------------------------------------------


def test_voxelize_single_and_pair():
    sp = spec(c=2)
    c = sp.centers()[2, 1, 1]
    vol = voxelize_points(c[None], torch.tensor([[1.0, -2.0]]), sp)
    assert torch.equal(vol.data[2, 1, 1], torch.tensor([1.0, -2.0]))
    assert torch.count_nonzero(vol.data) == 2
    pts = np.stack([c, c + 0.1])
    vol = voxelize_points(pts, torch.tensor([[1.0, 0.0], [3.0, 4.0]]), sp)
    assert torch.equal(vol.data[2, 1, 1], torch.tensor([2.0, 2.0]))


def brute_force_voxelize(points, feats, sp):
    X, Y, Z = sp.resolution
    out = np.zeros((X, Y, Z, feats.shape[1]))
    for i, j, k in itertools.product(range(X), range(Y), range(Z)):
        lo = sp.bounds.min + np.array([i, j, k]) * sp.voxel_size
        hi = lo + sp.voxel_size
        inside = np.all((points >= lo) & (points < hi), axis=1)
        if inside.any():
            out[i, j, k] = feats[inside].mean(axis=0)
    return out


def test_voxelize_matches_brute_force(rng):
    sp = spec(c=3)
    pts = rng.uniform(sp.bounds.min, sp.bounds.max, (100, 3))
    feats = rng.normal(size=(100, 3))
    vol = voxelize_points(pts, torch.from_numpy(feats), sp)
    np.testing.assert_allclose(vol.data.numpy(), brute_force_voxelize(pts, feats, sp), rtol=0, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_voxelize_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    sp = spec(res=(3, 3, 2), c=2)
    pts = rng.uniform(sp.bounds.min, sp.bounds.max, (60, 3))
    feats = rng.normal(size=(60, 2)) * 10.0 ** rng.integers(-3, 4, size=(60, 1))
    perm = rng.permutation(60)
    a = voxelize_points(pts, torch.from_numpy(feats), sp).data
    b = voxelize_points(pts[perm], torch.from_numpy(feats[perm]), sp).data
    assert torch.equal(a, b)


def test_voxelize_keeps_height_and_ignores_outside():
    sp = spec(c=1)
    c = sp.centers()
    pts = np.stack([c[0, 0, 0], c[0, 0, 2], [9.0, 9.0, 9.0]])
    vol = voxelize_points(pts, torch.tensor([[1.0], [2.0], [5.0]]), sp)
    assert vol.data[0, 0, 0, 0] == 1.0 and vol.data[0, 0, 2, 0] == 2.0
    assert float(vol.data.sum()) == 3.0
    occ = occupancy(pts, sp)
    assert occ.sum() == 2 and occ[0, 0, 0] and occ[0, 0, 2]


def test_voxelize_empty():
    vol = voxelize_points(np.zeros((0, 3)), torch.zeros(0, 2), spec(c=2))
    assert torch.count_nonzero(vol.data) == 0


# projection layer -------------------------------------------------------


def naive_conv3d(x, w, b):
    X, Y, Z, _ = x.shape
    co = w.shape[0]
    pad = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((X, Y, Z, co))
    for i, j, k in itertools.product(range(X), range(Y), range(Z)):
        patch = pad[i:i + 3, j:j + 3, k:k + 3]  # (3,3,3,Ci)
        out[i, j, k] = np.einsum("abci,oiabc->o", patch, w) + (0 if b is None else b)
    return out


def test_conv_matches_naive_oracle(rng):
    x = rng.normal(size=(5, 5, 5, 4))
    w = rng.normal(size=(6, 4, 3, 3, 3))
    b = rng.normal(size=6)
    got = conv3d_same(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b)).numpy()
    np.testing.assert_allclose(got, naive_conv3d(x, w, b), rtol=0, atol=1e-12)


def test_projection_identity_kernel_and_bias(rng):
    sp = spec(res=(4, 4, 3), c=32)
    x = torch.from_numpy(rng.normal(size=(4, 4, 3, 32)))
    w = torch.zeros(32, 32, 3, 3, 3)
    w[:, :, 1, 1, 1] = torch.eye(32)
    out = projection_layer(FeatureVolume(sp, x), w, torch.zeros(32))
    assert out.spec.feature_dim == 32
    torch.testing.assert_close(out.data, x, rtol=0, atol=0)
    bias = torch.arange(32.0)
    out = projection_layer(FeatureVolume.zeros(sp), torch.from_numpy(rng.normal(size=(32, 32, 3, 3, 3))), bias)
    assert torch.equal(out.data, bias.expand(4, 4, 3, 32))


def test_projection_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        projection_layer(FeatureVolume.zeros(spec(c=3)), torch.zeros(32, 4, 3, 3, 3), torch.zeros(32))


def test_projection_kernel_gradient_finite_differences(rng):
    sp = spec(res=(3, 3, 3), c=2)
    x = FeatureVolume(sp, torch.from_numpy(rng.normal(size=(3, 3, 3, 2))))
    w = torch.from_numpy(rng.normal(size=(3, 2, 3, 3, 3))).requires_grad_(True)
    b = torch.zeros(3)
    probe = torch.from_numpy(rng.normal(size=(3, 3, 3, 3)))
    loss = lambda: (projection_layer(x, w, b).data * probe).sum()  # noqa: E731
    (g,) = torch.autograd.grad(loss(), [w])
    flat = w.detach().view(-1)
    for i in rng.choice(flat.numel(), 20, replace=False):
        with torch.no_grad():
            orig = flat[i].item()
            flat[i] = orig + 1e-6
            up = float(loss())
            flat[i] = orig - 1e-6
            down = float(loss())
            flat[i] = orig
        fd = (up - down) / 2e-6
        assert abs(fd - float(g.view(-1)[i])) <= 1e-6 * max(abs(fd), 1e-3)
