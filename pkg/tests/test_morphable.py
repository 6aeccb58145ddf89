import numpy as np
import pytest

from rav import morphable as M
from rav.errors import ContractViolation


@pytest.fixture(scope="module")
def model():
    return M.make_synthetic_model(seed=0)


@pytest.fixture(scope="module")
def zeros():
    return M.CoefficientPair.zeros(8, 6)


def test_zero_coeffs_returns_mean_exactly(model, zeros):
    assert np.array_equal(M.evaluate(model, zeros), model.mean_shape)


def test_evaluate_linearity(model):
    rng = np.random.default_rng(3)
    a = rng.uniform(-1, 1, model.k_shape)
    c1 = M.CoefficientPair(a, np.zeros(model.k_expression))
    c2 = M.CoefficientPair(2 * a, np.zeros(model.k_expression))
    d1 = M.evaluate(model, c1) - model.mean_shape
    d2 = M.evaluate(model, c2) - model.mean_shape
    assert np.max(np.abs(d2 - 2 * d1)) <= 1e-9


def test_evaluate_superposition(model):
    rng = np.random.default_rng(4)
    for _ in range(5):
        a1, a2 = rng.uniform(-1, 1, (2, model.k_shape))
        b1, b2 = rng.uniform(-1, 1, (2, model.k_expression))
        v12 = M.evaluate(model, M.CoefficientPair(a1 + a2, b1 + b2))
        v1 = M.evaluate(model, M.CoefficientPair(a1, b1))
        v2 = M.evaluate(model, M.CoefficientPair(a2, b2))
        assert np.max(np.abs(v12 - (v1 + v2 - model.mean_shape))) <= 1e-9


def test_evaluate_matches_per_vertex_loop_oracle(model):
    rng = np.random.default_rng(5)
    a = rng.uniform(-2, 2, model.k_shape)
    b = rng.uniform(-2, 2, model.k_expression)
    got = M.evaluate(model, M.CoefficientPair(a, b))
    # independent brute-force per-vertex summation
    expect = np.zeros_like(model.mean_shape)
    for v in range(model.n_vertices):
        p = model.mean_shape[v].copy()
        for i in range(model.k_shape):
            p = p + a[i] * model.shape_basis[i, v]
        for j in range(model.k_expression):
            p = p + b[j] * model.expression_basis[j, v]
        expect[v] = p
    assert np.max(np.abs(got - expect)) <= 1e-9


def test_evaluate_dimension_mismatch(model):
    with pytest.raises(ContractViolation):
        M.evaluate(model, M.CoefficientPair(np.zeros(3), np.zeros(model.k_expression)))


def test_coeff_clip_enforced():
    with pytest.raises(ContractViolation):
        M.CoefficientPair(np.array([4.0]), np.zeros(2))


def test_make_synthetic_model_deterministic():
    m1 = M.make_synthetic_model(seed=11, V=300, K_s=4, K_e=4)
    m2 = M.make_synthetic_model(seed=11, V=300, K_s=4, K_e=4)
    assert np.array_equal(m1.mean_shape, m2.mean_shape)
    assert np.array_equal(m1.shape_basis, m2.shape_basis)
    assert np.array_equal(m1.triangles, m2.triangles)
    assert np.array_equal(m1.vertex_colors, m2.vertex_colors)


def test_make_synthetic_model_shapes():
    m = M.make_synthetic_model(seed=2, V=500, K_s=8, K_e=6)
    assert m.mean_shape.shape == (500, 3)
    assert m.shape_basis.shape == (8, 500, 3)
    assert m.expression_basis.shape == (6, 500, 3)
    assert m.vertex_colors.shape == (500, 3)
    assert m.semantic_regions.shape == (500,)


def test_basis_orthogonality(model):
    for basis in (model.shape_basis, model.expression_basis):
        flat = basis.reshape(basis.shape[0], -1)
        for i in range(flat.shape[0]):
            for j in range(i):
                dot = abs(flat[i] @ flat[j])
                assert dot <= 1e-6 * np.linalg.norm(flat[i]) * np.linalg.norm(flat[j])


def test_render_constant_color_frontal(model, zeros):
    grey = M.MorphableModel(
        mean_shape=model.mean_shape, shape_basis=model.shape_basis,
        expression_basis=model.expression_basis,
        vertex_colors=np.full_like(model.vertex_colors, 0.5),
        triangles=model.triangles, semantic_regions=model.semantic_regions)
    pose = M.default_pose(64)
    img = M.render_3dmm(grey, zeros, pose, 64)
    fp = M.face_footprint(grey, zeros, pose, 64).astype(bool)
    assert np.allclose(img[fp], 0.5)
    assert np.allclose(img[~fp], 1.0)


def test_render_mirror_symmetry(model, zeros):
    a = M.render_3dmm(model, zeros, M.default_pose(96, yaw=60), 96)
    b = M.render_3dmm(model, zeros, M.default_pose(96, yaw=-60), 96)
    assert np.max(np.abs(a - b[:, ::-1])) <= 1e-6


def test_render_deterministic(model, zeros):
    pose = M.default_pose(64, yaw=12, pitch=-8)
    a = M.render_3dmm(model, zeros, pose, 64)
    b = M.render_3dmm(model, zeros, pose, 64)
    assert np.array_equal(a, b)


def test_degenerate_pose_rejected():
    with pytest.raises(ContractViolation):
        M.CameraPose(yaw=0, pitch=0, distance=0.9, focal=60, principal=(32, 32))


def _bary(p, a, b, c):
    area = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
    w0 = ((b[0] - p[0]) * (c[1] - p[1]) - (c[0] - p[0]) * (b[1] - p[1])) / area
    w1 = ((c[0] - p[0]) * (a[1] - p[1]) - (a[0] - p[0]) * (c[1] - p[1])) / area
    return w0, w1, 1.0 - w0 - w1


def test_single_triangle_footprint_matches_halfplane_oracle():
    # One triangle straddling the image; oracle = per-pixel point-in-triangle.
    verts = np.array([[-0.5, -0.5, 0.0], [0.6, -0.4, 0.0], [0.0, 0.7, 0.0]])
    tris = np.array([[0, 1, 2]], dtype=np.int32)
    model = M.MorphableModel(
        mean_shape=verts, shape_basis=np.zeros((1, 3, 3)),
        expression_basis=np.zeros((1, 3, 3)),
        vertex_colors=np.zeros((3, 3)), triangles=tris,
        semantic_regions=np.zeros(3, dtype=np.int32))
    pose = M.default_pose(48)
    coeffs = M.CoefficientPair.zeros(1, 1)
    fp = M.face_footprint(model, coeffs, pose, 48).astype(bool)
    uv, _ = M.project_vertices(verts, pose)
    oracle = np.zeros((48, 48), dtype=bool)
    for iy in range(48):
        for ix in range(48):
            w = _bary((ix + 0.5, iy + 0.5), uv[0], uv[1], uv[2])
            oracle[iy, ix] = all(wi >= 0 for wi in w)
    assert np.array_equal(fp, oracle)


def test_zbuffer_winner_has_minimal_depth(model, zeros):
    # brute-force per-pixel depth scan over all covering triangles, 48x48
    res = 48
    pose = M.default_pose(res, yaw=25, pitch=10)
    verts = M.evaluate(model, zeros)
    tri_index, _ = M._rasterize(verts, model.triangles, pose, res)
    uv, depth = M.project_vertices(verts, pose)
    ys, xs = np.nonzero(tri_index >= 0)
    rng = np.random.default_rng(0)
    pick = rng.choice(len(ys), size=min(60, len(ys)), replace=False)
    for k in pick:
        iy, ix = ys[k], xs[k]
        p = (ix + 0.5, iy + 0.5)
        best = np.inf
        for t, (i0, i1, i2) in enumerate(model.triangles):
            if min(depth[i0], depth[i1], depth[i2]) <= 0:
                continue
            try:
                w = _bary(p, uv[i0], uv[i1], uv[i2])
            except ZeroDivisionError:
                continue
            if all(wi >= 0 for wi in w):
                z = w[0] * depth[i0] + w[1] * depth[i1] + w[2] * depth[i2]
                best = min(best, z)
        won = model.triangles[tri_index[iy, ix]]
        w = _bary(p, uv[won[0]], uv[won[1]], uv[won[2]])
        z_won = w[0] * depth[won[0]] + w[1] * depth[won[1]] + w[2] * depth[won[2]]
        assert z_won <= best + 1e-9


def test_region_mask_subset_and_partition(model, zeros):
    pose = M.default_pose(64)
    fp = M.face_footprint(model, zeros, pose, 64)
    union = np.zeros_like(fp)
    for label in M.REGION_LABELS:
        mask = M.region_mask(model, zeros, pose, 64, label)
        assert np.all(mask <= fp), label
        union = np.maximum(union, mask)
    assert np.array_equal(union, fp)


def test_region_mask_left_eye_count_matches_oracle(model, zeros):
    res = 48
    pose = M.default_pose(res)
    mask = M.region_mask(model, zeros, pose, res, "left-eye")
    # independent rasterization: per-pixel scan for min-depth covering triangle
    verts = M.evaluate(model, zeros)
    uv, depth = M.project_vertices(verts, pose)
    code = M.REGION_LABELS.index("left-eye")
    oracle = np.zeros((res, res), dtype=np.uint8)
    # restrict the scan to the mask's bounding box +2 for tractability
    ys, xs = np.nonzero(mask)
    y0, y1 = ys.min() - 2, ys.max() + 3
    x0, x1 = xs.min() - 2, xs.max() + 3
    for iy in range(y0, y1):
        for ix in range(x0, x1):
            p = (ix + 0.5, iy + 0.5)
            best, best_t = np.inf, -1
            for t, (i0, i1, i2) in enumerate(model.triangles):
                w = _bary(p, uv[i0], uv[i1], uv[i2])
                if all(wi >= 0 for wi in w):
                    z = w[0] * depth[i0] + w[1] * depth[i1] + w[2] * depth[i2]
                    if z < best:
                        best, best_t = z, t
            if best_t >= 0 and (model.semantic_regions[model.triangles[best_t]] == code).any():
                oracle[iy, ix] = 1
    assert mask[y0:y1, x0:x1].sum() == oracle[y0:y1, x0:x1].sum()
    assert np.array_equal(mask[y0:y1, x0:x1], oracle[y0:y1, x0:x1])


def test_region_mask_unknown_label(model, zeros):
    with pytest.raises(ContractViolation):
        M.region_mask(model, zeros, M.default_pose(64), 64, "nostril")


def test_model_archive_roundtrip(tmp_path, model):
    path = tmp_path / "model.ravmm"
    M.save_model(model, path)
    loaded = M.load_model(path)
    loaded.validate()
    assert loaded.n_vertices == model.n_vertices
    assert np.allclose(loaded.mean_shape, model.mean_shape, atol=1e-6)
    assert np.array_equal(loaded.triangles, model.triangles)
    assert np.array_equal(loaded.semantic_regions, model.semantic_regions)
    with open(path, "rb") as fh:
        assert fh.read(6) == b"RAVMM1"
