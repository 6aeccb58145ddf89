"""Simplified linear 3D morphable head model.

Provides a procedurally generated, license-free stand-in for a statistical
face model: mean shape + orthogonal identity/expression deformation bases,
per-vertex colors, semantic regions, and a deterministic software rasterizer
(pinhole camera, z-buffer, barycentric vertex-color interpolation, no
lighting).

All functions are pure over immutable inputs and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .archive import MODEL_MAGIC, load_archive, save_archive
from .errors import ContractViolation

REGION_LABELS = ("skin", "left-eye", "right-eye", "eyebrow", "mouth", "other")

# Unit directions of the facial feature centers on the canonical head
# (face looks along +z, image-left is model -x under the frontal camera).
_REGION_CENTERS = {
    "left-eye": (-0.38, 0.28, 0.88),
    "right-eye": (0.38, 0.28, 0.88),
    "eyebrow-l": (-0.40, 0.52, 0.78),
    "eyebrow-r": (0.40, 0.52, 0.78),
    "mouth": (0.0, -0.42, 0.91),
}
_EYE_ANGLE = 0.22
_BROW_ANGLE = 0.20
_MOUTH_ANGLE = 0.28

_HEAD_AXES = np.array([0.78, 1.0, 0.88])


@dataclass(frozen=True)
class CoefficientPair:
    """Identity (alpha) and expression (beta) coefficient vectors."""

    shape_coeffs: np.ndarray
    expression_coeffs: np.ndarray
    coeff_clip: float = 3.0

    def __post_init__(self):
        a = np.asarray(self.shape_coeffs, dtype=np.float64)
        b = np.asarray(self.expression_coeffs, dtype=np.float64)
        object.__setattr__(self, "shape_coeffs", a)
        object.__setattr__(self, "expression_coeffs", b)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ContractViolation("coefficients must be finite")
        if a.size and np.max(np.abs(a)) > self.coeff_clip + 1e-12:
            raise ContractViolation("shape coefficient exceeds coeff_clip")
        if b.size and np.max(np.abs(b)) > self.coeff_clip + 1e-12:
            raise ContractViolation("expression coefficient exceeds coeff_clip")

    @staticmethod
    def zeros(k_s: int, k_e: int) -> "CoefficientPair":
        return CoefficientPair(np.zeros(k_s), np.zeros(k_e))


@dataclass(frozen=True)
class CameraPose:
    """Orbit camera looking at the head center.

    yaw/pitch in degrees, distance in canonical units (> 1, outside the unit
    head sphere), focal length and principal point in pixels.
    """

    yaw: float
    pitch: float
    distance: float
    focal: float
    principal: tuple[float, float]
    orthographic: bool = False

    def __post_init__(self):
        if not self.distance > 1.0:
            raise ContractViolation("camera distance must exceed 1 (unit head sphere)")
        if not abs(self.pitch) < 90.0:
            raise ContractViolation("|pitch| must be < 90 degrees")


def default_pose(resolution: int, yaw: float = 0.0, pitch: float = 0.0,
                 distance: float = 2.5) -> CameraPose:
    """Frontal-ish pose framing the head in a `resolution` square image."""
    return CameraPose(yaw=yaw, pitch=pitch, distance=distance,
                      focal=0.9 * resolution,
                      principal=(resolution / 2.0, resolution / 2.0))


@dataclass(frozen=True)
class MorphableModel:
    mean_shape: np.ndarray        # V x 3
    shape_basis: np.ndarray       # K_s x V x 3
    expression_basis: np.ndarray  # K_e x V x 3
    vertex_colors: np.ndarray     # V x 3 in [0, 1]
    triangles: np.ndarray         # F x 3 int
    semantic_regions: np.ndarray  # V int codes into REGION_LABELS

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def k_shape(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def k_expression(self) -> int:
        return self.expression_basis.shape[0]

    def validate(self) -> None:
        V = self.n_vertices
        if self.triangles.min() < 0 or self.triangles.max() >= V:
            raise ContractViolation("triangle index out of range")
        referenced = np.zeros(V, dtype=bool)
        referenced[self.triangles.ravel()] = True
        if not referenced.all():
            raise ContractViolation("unreferenced vertex in mesh")
        for basis in (self.shape_basis, self.expression_basis):
            flat = basis.reshape(basis.shape[0], -1)
            gram = flat @ flat.T
            norms = np.sqrt(np.diag(gram))
            off = gram - np.diag(np.diag(gram))
            if basis.shape[0] > 1 and np.max(np.abs(off)) > 1e-6 * norms.max() ** 2:
                raise ContractViolation("basis vectors not orthogonal")
        if self.vertex_colors.min() < 0 or self.vertex_colors.max() > 1:
            raise ContractViolation("vertex colors outside [0, 1]")


def evaluate(model: MorphableModel, coeffs: CoefficientPair) -> np.ndarray:
    """Vertex positions: mean + sum_i alpha_i S_i + sum_j beta_j E_j."""
    a, b = coeffs.shape_coeffs, coeffs.expression_coeffs
    if a.shape != (model.k_shape,) or b.shape != (model.k_expression,):
        raise ContractViolation(
            f"coefficient dims {a.shape}/{b.shape} do not match bases "
            f"({model.k_shape}, {model.k_expression})")
    verts = model.mean_shape.copy()
    if a.size:
        verts = verts + np.tensordot(a, model.shape_basis, axes=1)
    if b.size:
        verts = verts + np.tensordot(b, model.expression_basis, axes=1)
    return verts


# ---------------------------------------------------------------------------
# camera + rasterizer

def camera_basis(pose: CameraPose):
    """Returns (center, right, down, forward) world-space camera frame."""
    cy, sy = math.cos(math.radians(pose.yaw)), math.sin(math.radians(pose.yaw))
    cp, sp = math.cos(math.radians(pose.pitch)), math.sin(math.radians(pose.pitch))
    center = pose.distance * np.array([sy * cp, sp, cy * cp])
    forward = -center / np.linalg.norm(center)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return center, right, down, forward


def project_vertices(verts: np.ndarray, pose: CameraPose):
    """Perspective (or orthographic) projection.

    Returns (uv: V x 2 pixel coords, depth: V camera-space depths along the
    viewing axis).
    """
    center, right, down, forward = camera_basis(pose)
    rel = verts - center
    depth = rel @ forward
    x = rel @ right
    y = rel @ down
    cx, cy = pose.principal
    if pose.orthographic:
        scale = pose.focal / pose.distance
        u = scale * x + cx
        v = scale * y + cy
    else:
        u = pose.focal * x / depth + cx
        v = pose.focal * y / depth + cy
    return np.stack([u, v], axis=1), depth


def _rasterize(verts, triangles, pose: CameraPose, resolution: int):
    """Z-buffer rasterization.

    Returns (tri_index: H x W int, -1 where background; bary: H x W x 3
    barycentric weights of the winning triangle).
    """
    H = W = resolution
    uv, depth = project_vertices(verts, pose)
    tri_index = np.full((H, W), -1, dtype=np.int64)
    zbuf = np.full((H, W), np.inf)
    bary_out = np.zeros((H, W, 3))

    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5

    for t, (i0, i1, i2) in enumerate(triangles):
        if depth[i0] <= 1e-6 or depth[i1] <= 1e-6 or depth[i2] <= 1e-6:
            continue
        p0, p1, p2 = uv[i0], uv[i1], uv[i2]
        xmin = max(int(math.floor(min(p0[0], p1[0], p2[0]) - 0.5)), 0)
        xmax = min(int(math.ceil(max(p0[0], p1[0], p2[0]) + 0.5)), W - 1)
        ymin = max(int(math.floor(min(p0[1], p1[1], p2[1]) - 0.5)), 0)
        ymax = min(int(math.ceil(max(p0[1], p1[1], p2[1]) + 0.5)), H - 1)
        if xmin > xmax or ymin > ymax:
            continue
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if area == 0.0:
            continue
        px = xs[xmin:xmax + 1][None, :]
        py = ys[ymin:ymax + 1][:, None]
        w0 = ((p1[0] - px) * (p2[1] - py) - (p2[0] - px) * (p1[1] - py)) / area
        w1 = ((p2[0] - px) * (p0[1] - py) - (p0[0] - px) * (p2[1] - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not inside.any():
            continue
        z = w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]
        patch = zbuf[ymin:ymax + 1, xmin:xmax + 1]
        win = inside & (z < patch)
        patch[win] = z[win]
        tri_index[ymin:ymax + 1, xmin:xmax + 1][win] = t
        bp = bary_out[ymin:ymax + 1, xmin:xmax + 1]
        bp[win, 0] = w0[win]
        bp[win, 1] = w1[win]
        bp[win, 2] = w2[win]
    return tri_index, bary_out


def _check_resolution(resolution):
    if not (isinstance(resolution, (int, np.integer)) and 32 <= resolution <= 512):
        raise ContractViolation("resolution must be an int in [32, 512]")


def render_3dmm(model: MorphableModel, coeffs: CoefficientPair, pose: CameraPose,
                resolution: int, background: float = 1.0) -> np.ndarray:
    """Deterministic flat-shaded render. Returns H x W x 3 floats in [0, 1]."""
    _check_resolution(resolution)
    verts = evaluate(model, coeffs)
    tri_index, bary = _rasterize(verts, model.triangles, pose, resolution)
    img = np.full((resolution, resolution, 3), float(background))
    covered = tri_index >= 0
    if covered.any():
        tris = model.triangles[tri_index[covered]]          # N x 3
        cols = model.vertex_colors[tris]                    # N x 3 x 3
        w = bary[covered][:, :, None]                       # N x 3 x 1
        img[covered] = np.clip((cols * w).sum(axis=1), 0.0, 1.0)
    return img


def face_footprint(model: MorphableModel, coeffs: CoefficientPair, pose: CameraPose,
                   resolution: int) -> np.ndarray:
    """Binary mask of pixels covered by any triangle."""
    _check_resolution(resolution)
    verts = evaluate(model, coeffs)
    tri_index, _ = _rasterize(verts, model.triangles, pose, resolution)
    return (tri_index >= 0).astype(np.uint8)


def region_mask(model: MorphableModel, coeffs: CoefficientPair, pose: CameraPose,
                resolution: int, region_label: str) -> np.ndarray:
    """Mask of pixels whose visible (z-buffer winning) triangle touches the region.

    A triangle belongs to a region if any of its vertices carries the label, so
    the union over all labels reproduces the full face footprint.
    """
    if region_label not in REGION_LABELS:
        raise ContractViolation(f"unknown region label {region_label!r}")
    _check_resolution(resolution)
    verts = evaluate(model, coeffs)
    tri_index, _ = _rasterize(verts, model.triangles, pose, resolution)
    code = REGION_LABELS.index(region_label)
    tri_has = (model.semantic_regions[model.triangles] == code).any(axis=1)  # F
    mask = np.zeros((resolution, resolution), dtype=np.uint8)
    covered = tri_index >= 0
    mask[covered] = tri_has[tri_index[covered]]
    return mask


# ---------------------------------------------------------------------------
# synthetic model construction

def _hemisphere_points(n: int) -> np.ndarray:
    """n points on the x > 0 half of the unit sphere, golden-angle spiral."""
    golden = (1 + 5 ** 0.5) / 2
    k = np.arange(n)
    y = 1.0 - 2.0 * (k + 0.5) / n
    r = np.sqrt(np.clip(1.0 - y * y, 0.0, 1.0))
    # azimuth confined to (0, pi) so x = r sin(phi) > 0
    phi = math.pi * ((k * golden) % 1.0) * 0.96 + 0.02 * math.pi
    return np.stack([r * np.sin(phi), y, r * np.cos(phi)], axis=1)


def _smooth_field(rng, unit_dirs: np.ndarray, n_lobes: int = 5) -> np.ndarray:
    """Random smooth V x 3 deformation field: Gaussian lobes on the sphere."""
    V = unit_dirs.shape[0]
    out = np.zeros((V, 3))
    for _ in range(n_lobes):
        c = rng.normal(size=3)
        c /= np.linalg.norm(c)
        s = rng.uniform(0.35, 0.8)
        w = rng.normal(size=3)
        g = np.exp(-np.sum((unit_dirs - c) ** 2, axis=1) / (2 * s * s))
        out += g[:, None] * w[None, :]
    return out


def _orthogonalize(fields: np.ndarray, scale: float) -> np.ndarray:
    """Sequential Gram-Schmidt on flattened fields, rescaled to equal norm."""
    K = fields.shape[0]
    flat = fields.reshape(K, -1).astype(np.float64)
    for i in range(K):
        for j in range(i):
            flat[i] -= (flat[i] @ flat[j]) * flat[j]
        n = np.linalg.norm(flat[i])
        if n < 1e-12:
            raise ContractViolation("degenerate basis field")
        flat[i] /= n
    return (flat * scale).reshape(fields.shape)


def _region_codes(unit_dirs: np.ndarray) -> np.ndarray:
    centers = {k: np.asarray(v) / np.linalg.norm(v) for k, v in _REGION_CENTERS.items()}
    ang = {k: np.arccos(np.clip(unit_dirs @ c, -1, 1)) for k, c in centers.items()}
    codes = np.full(unit_dirs.shape[0], REGION_LABELS.index("other"), dtype=np.int32)
    codes[unit_dirs[:, 2] > 0.1] = REGION_LABELS.index("skin")
    codes[ang["mouth"] < _MOUTH_ANGLE] = REGION_LABELS.index("mouth")
    brow = (ang["eyebrow-l"] < _BROW_ANGLE) | (ang["eyebrow-r"] < _BROW_ANGLE)
    codes[brow] = REGION_LABELS.index("eyebrow")
    codes[ang["left-eye"] < _EYE_ANGLE] = REGION_LABELS.index("left-eye")
    codes[ang["right-eye"] < _EYE_ANGLE] = REGION_LABELS.index("right-eye")
    return codes


def make_synthetic_model(seed: int, V: int = 500, K_s: int = 8, K_e: int = 6) -> MorphableModel:
    """Deterministic ellipsoid-like head with carved feature regions.

    The mesh is bilaterally symmetric in x (vertices come in mirrored pairs),
    bases are orthogonalized random smooth deformation fields, and the first
    expression components are structured: 0 = horizontal eye shift (gaze yaw),
    1 = vertical eye shift (gaze pitch), 2 = mouth drop (jaw open).
    """
    if V < 16:
        raise ContractViolation("V must be at least 16")
    rng = np.random.default_rng(seed)
    half = _hemisphere_points(V // 2)
    mirrored = half * np.array([-1.0, 1.0, 1.0])
    unit = np.concatenate([half, mirrored], axis=0)
    if V % 2:
        unit = np.concatenate([unit, np.array([[0.0, -1.0, 0.0]])], axis=0)
    mean_shape = unit * _HEAD_AXES

    hull = ConvexHull(mean_shape)
    triangles = hull.simplices.astype(np.int32)
    # qhull's triangulation of coplanar patches need not mirror; close the set
    # under the x-mirror vertex pairing so renders are bilaterally symmetric.
    n_half = V // 2
    mirror_idx = np.arange(V)
    mirror_idx[:n_half] += n_half
    mirror_idx[n_half:2 * n_half] -= n_half
    mirrored_tris = mirror_idx[triangles]
    seen = {tuple(sorted(t)) for t in triangles.tolist()}
    extra = [t for t in mirrored_tris.tolist() if tuple(sorted(t)) not in seen]
    if extra:
        triangles = np.concatenate([triangles, np.asarray(extra, dtype=np.int32)])

    codes = _region_codes(unit)

    # Symmetric, seed-dependent skin tone with smooth variation.
    base = np.array([rng.uniform(0.45, 0.85), rng.uniform(0.35, 0.7), rng.uniform(0.3, 0.6)])
    a1, a2, p1, p2 = rng.uniform(2.0, 5.0, size=4)
    wob = 0.08 * np.cos(a1 * unit[:, 1] + p1) * np.cos(a2 * unit[:, 2] + p2)
    colors = np.clip(base[None, :] + wob[:, None], 0.05, 0.95)
    colors[codes == REGION_LABELS.index("left-eye")] = (0.12, 0.12, 0.16)
    colors[codes == REGION_LABELS.index("right-eye")] = (0.12, 0.12, 0.16)
    colors[codes == REGION_LABELS.index("eyebrow")] = (0.18, 0.13, 0.09)
    colors[codes == REGION_LABELS.index("mouth")] = (0.62, 0.24, 0.26)

    shape_fields = np.stack([_smooth_field(rng, unit) for _ in range(K_s)])
    shape_basis = _orthogonalize(shape_fields, scale=0.02 * math.sqrt(3 * V))

    eye = (codes == REGION_LABELS.index("left-eye")) | (codes == REGION_LABELS.index("right-eye"))
    mouth = codes == REGION_LABELS.index("mouth")
    expr_fields = []
    f = np.zeros((V, 3)); f[eye, 0] = 1.0
    expr_fields.append(f)
    f = np.zeros((V, 3)); f[eye, 1] = 1.0
    expr_fields.append(f)
    f = np.zeros((V, 3)); f[mouth, 1] = -1.0
    expr_fields.append(f)
    for _ in range(max(K_e - 3, 0)):
        expr_fields.append(_smooth_field(rng, unit))
    expr_fields = np.stack(expr_fields[:K_e])
    expression_basis = _orthogonalize(expr_fields, scale=0.015 * math.sqrt(3 * V))

    model = MorphableModel(mean_shape=mean_shape, shape_basis=shape_basis,
                           expression_basis=expression_basis, vertex_colors=colors,
                           triangles=triangles, semantic_regions=codes)
    model.validate()
    return model


def landmark_vertex_indices(model: MorphableModel) -> dict:
    """Named landmark vertices derived from the mean shape's regions."""
    codes = model.semantic_regions
    pos = model.mean_shape

    def region(name):
        idx = np.where(codes == REGION_LABELS.index(name))[0]
        if idx.size == 0:
            raise ContractViolation(f"model has no {name!r} vertices")
        return idx

    le, re_, mo = region("left-eye"), region("right-eye"), region("mouth")
    skin = region("skin")
    front = np.where(pos[:, 2] > 0.2)[0]

    def centroid_vertex(idx):
        c = pos[idx].mean(axis=0)
        return idx[np.argmin(np.sum((pos[idx] - c) ** 2, axis=1))]

    return {
        "left_eye_outer": int(le[np.argmin(pos[le, 0])]),
        "left_eye_inner": int(le[np.argmax(pos[le, 0])]),
        "right_eye_inner": int(re_[np.argmin(pos[re_, 0])]),
        "right_eye_outer": int(re_[np.argmax(pos[re_, 0])]),
        "left_iris": int(centroid_vertex(le)),
        "right_iris": int(centroid_vertex(re_)),
        "nose_tip": int(skin[np.argmax(
            (pos[skin] / np.linalg.norm(pos[skin], axis=1, keepdims=True))
            @ np.array([0.0, -0.15, 0.99]))]),
        "mouth_left": int(mo[np.argmin(pos[mo, 0])]),
        "mouth_right": int(mo[np.argmax(pos[mo, 0])]),
        "chin": int(front[np.argmin(pos[front, 1] + 2.0 * np.abs(pos[front, 0]))]),
    }


# ---------------------------------------------------------------------------
# serialization

def save_model(model: MorphableModel, path) -> None:
    meta = (model.n_vertices, model.k_shape, model.k_expression, model.triangles.shape[0])
    save_archive(path, {
        "mean_shape": model.mean_shape,
        "shape_basis": model.shape_basis,
        "expression_basis": model.expression_basis,
        "vertex_colors": model.vertex_colors,
        "triangles": model.triangles,
        "semantic_regions": model.semantic_regions,
    }, MODEL_MAGIC, meta=meta)


def load_model(path) -> MorphableModel:
    arrays, meta, _ = load_archive(path, expect_magic=MODEL_MAGIC)
    model = MorphableModel(
        mean_shape=arrays["mean_shape"].astype(np.float64),
        shape_basis=arrays["shape_basis"].astype(np.float64),
        expression_basis=arrays["expression_basis"].astype(np.float64),
        vertex_colors=arrays["vertex_colors"].astype(np.float64),
        triangles=arrays["triangles"].astype(np.int32),
        semantic_regions=arrays["semantic_regions"].astype(np.int32),
    )
    V, K_s, K_e, F = meta
    if model.n_vertices != V or model.k_shape != K_s or model.k_expression != K_e \
            or model.triangles.shape[0] != F:
        raise ContractViolation("archive header disagrees with array shapes")
    return model
