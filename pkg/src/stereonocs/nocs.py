"""Mesh normalization into NOCS, ray casting, and front/back NOCS map rendering.

A NOCS (normalized object coordinate space) mesh lives in the unit cube:
vertices are recentered on (0.5, 0.5, 0.5) and scaled so the tight bounding
box diagonal is exactly 1. The front-view map stores, per pixel, the NOCS
coordinates of the surface point nearest the camera along that pixel's ray;
the back-view map stores the farthest one. Both views share a mask.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose

HIT_T_EPS = 1e-9  # ignore hits at/behind the ray origin
HIT_DEDUP_EPS = 1e-9  # collapse duplicate hits on shared triangle edges
VIEW_FRONT = "front"
VIEW_BACK = "back"

MAP_MAGIC = b"NOCS"
MAP_VERSION = 1


class DegenerateMesh(ValueError):
    """Mesh bounding box has (numerically) zero diagonal."""


class ObjParseError(ValueError):
    """OBJ input outside the supported v / triangular-f subset."""


class BadMagic(ValueError):
    """NOCS map file does not start with the expected magic bytes."""


class VersionMismatch(ValueError):
    """NOCS map file has an unsupported version byte."""


class TruncatedFile(ValueError):
    """NOCS map file ends before the declared payload is complete."""


@dataclass
class TriangleMesh:
    """Indexed triangle mesh.

    ``vertices`` are the geometric positions (meters, or NOCS units after
    normalization); ``nocs`` optionally carries per-vertex canonical
    coordinates when the geometry has been moved out of the NOCS frame.
    When absent, vertices are their own NOCS coordinates.
    """

    vertices: np.ndarray  # (V, 3) float
    faces: np.ndarray  # (F, 3) int
    nocs: np.ndarray | None = None  # (V, 3) float or None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.shape[0] < 1:
            raise ValueError("mesh must have at least one triangle")
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if f.min(initial=0) < 0 or f.max(initial=-1) >= v.shape[0]:
            raise ValueError("face indices out of range")
        self.vertices = v
        self.faces = f
        if self.nocs is not None:
            n = np.asarray(self.nocs, dtype=float).reshape(-1, 3)
            if n.shape != v.shape:
                raise ValueError("per-vertex NOCS array must match vertices")
            self.nocs = n

    @property
    def nocs_coords(self) -> np.ndarray:
        return self.vertices if self.nocs is None else self.nocs

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, pose: Pose) -> "TriangleMesh":
        """Move the geometry by a pose while keeping NOCS attributes attached."""
        return TriangleMesh(pose.apply(self.vertices), self.faces, nocs=self.nocs_coords.copy())

    def triangle_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]


@dataclass(frozen=True)
class NocsNormalization:
    """Recorded mapping from metric space into the NOCS cube."""

    center: np.ndarray  # (3,) meters
    diagonal: float  # meters

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        if not self.diagonal > 0:
            raise ValueError("normalization diagonal must be positive")
        object.__setattr__(self, "center", c)

    def to_nocs(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.center) / self.diagonal + 0.5

    def to_metric(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - 0.5) * self.diagonal + self.center


def normalize_mesh_to_nocs(mesh: TriangleMesh) -> tuple[TriangleMesh, NocsNormalization]:
    """Center the mesh on (0.5, 0.5, 0.5) and scale its tight bbox diagonal to 1."""
    lo, hi = mesh.bbox()
    diag = float(np.linalg.norm(hi - lo))
    if diag < 1e-12:
        raise DegenerateMesh(f"bounding box diagonal {diag:.3g} is degenerate")
    center = (lo + hi) / 2.0
    verts = (mesh.vertices - center) / diag + 0.5
    return TriangleMesh(verts, mesh.faces.copy()), NocsNormalization(center, diag)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,) unit

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-12:
            raise ValueError(f"ray direction norm {n!r} is not 1")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    @staticmethod
    def through(origin, target) -> "Ray":
        o = np.asarray(origin, dtype=float)
        d = np.asarray(target, dtype=float) - o
        return Ray(o, d / np.linalg.norm(d))


@dataclass(frozen=True)
class Hit:
    distance: float
    point: np.ndarray  # (3,) same units as the mesh vertices
    nocs: np.ndarray  # (3,) canonical coordinates


class HitList:
    """Ray-mesh intersections sorted by strictly increasing positive distance."""

    def __init__(self, hits: list[Hit]):
        self.hits = hits

    def __len__(self):
        return len(self.hits)

    def __getitem__(self, i) -> Hit:
        return self.hits[i]

    def __iter__(self):
        return iter(self.hits)

    @property
    def distances(self) -> np.ndarray:
        return np.array([h.distance for h in self.hits])

    def nearest(self) -> Hit:
        return self.hits[0]

    def farthest(self) -> Hit:
        return self.hits[-1]


def _moller_trumbore(origin, direction, v0, e1, e2):
    """Intersect one ray with many triangles.

    Returns (t, u, v, valid) arrays over triangles; both-sided, no culling.
    """
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv_det
    t = np.einsum("ij,ij->i", e2, qvec) * inv_det
    eps = 1e-12
    valid = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1.0 + eps) & (t > HIT_T_EPS)
    return t, u, v, valid


def _ray_aabb_prefilter(origin, direction, tri_lo, tri_hi):
    """Slab test of one ray against per-triangle AABBs; conservative keep-mask."""
    inv = np.where(direction != 0.0, 1.0 / np.where(direction != 0.0, direction, 1.0), np.inf)
    with np.errstate(invalid="ignore"):  # inf * 0 lanes are masked out below
        t0 = (tri_lo - origin) * inv
        t1 = (tri_hi - origin) * inv
    # Degenerate axes (direction == 0): keep only if origin is inside the slab.
    zero = direction == 0.0
    inside = (origin >= tri_lo) & (origin <= tri_hi)
    tmin = np.where(zero, -np.inf, np.minimum(t0, t1)).max(axis=1)
    tmax = np.where(zero, np.inf, np.maximum(t0, t1)).min(axis=1)
    keep = (tmax >= np.maximum(tmin, 0.0)) & np.all(inside | ~zero, axis=1)
    return keep


def ray_mesh_intersections(ray: Ray, mesh: TriangleMesh) -> HitList:
    """All intersections of the ray with the mesh, sorted by distance.

    Coincident hits from shared triangle edges are merged within 1e-9 along
    the ray. An empty HitList means no intersection.
    """
    v0, v1, v2 = mesh.triangle_corners()
    tri_lo = np.minimum(np.minimum(v0, v1), v2)
    tri_hi = np.maximum(np.maximum(v0, v1), v2)
    keep = _ray_aabb_prefilter(ray.origin, ray.direction, tri_lo, tri_hi)
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return HitList([])
    e1 = v1[idx] - v0[idx]
    e2 = v2[idx] - v0[idx]
    t, u, v, valid = _moller_trumbore(ray.origin, ray.direction, v0[idx], e1, e2)
    sel = np.nonzero(valid)[0]
    if sel.size == 0:
        return HitList([])
    order = sel[np.argsort(t[sel], kind="stable")]
    nocs_v = mesh.nocs_coords
    hits: list[Hit] = []
    last_t = -np.inf
    for k in order:
        tk = float(t[k])
        if tk - last_t <= HIT_DEDUP_EPS:
            continue
        last_t = tk
        face = mesh.faces[idx[k]]
        w0 = 1.0 - u[k] - v[k]
        nocs = w0 * nocs_v[face[0]] + u[k] * nocs_v[face[1]] + v[k] * nocs_v[face[2]]
        hits.append(Hit(tk, ray.origin + tk * ray.direction, nocs))
    return HitList(hits)


@dataclass
class NocsMap:
    """Per-pixel NOCS coordinates with an object mask, for one view.

    Coordinates are stored as float32 so the binary file round-trip is
    bit-exact. Background pixels always carry (0, 0, 0). Rendered maps have
    coordinates inside [0, 1]^3; corrupted maps (simulated prediction error)
    may exceed it slightly.
    """

    coords: np.ndarray  # (H, W, 3) float32
    mask: np.ndarray  # (H, W) bool
    view: str  # VIEW_FRONT or VIEW_BACK

    def __post_init__(self):
        c = np.ascontiguousarray(np.asarray(self.coords), dtype=np.float32)
        m = np.asarray(self.mask, dtype=bool)
        if c.ndim != 3 or c.shape[2] != 3:
            raise ValueError(f"coords must be (H, W, 3), got {c.shape}")
        if m.shape != c.shape[:2]:
            raise ValueError("mask shape must match coords")
        if self.view not in (VIEW_FRONT, VIEW_BACK):
            raise ValueError(f"view must be 'front' or 'back', got {self.view!r}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coordinates must be finite")
        c[~m] = 0.0
        self.coords = c
        self.mask = m

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    def masked_pixels(self) -> tuple[np.ndarray, np.ndarray]:
        """(pixels (M, 2) float (u, v), coords (M, 3) float64) for masked-on pixels."""
        rows, cols = np.nonzero(self.mask)
        px = np.stack([cols.astype(float), rows.astype(float)], axis=1)
        return px, self.coords[rows, cols].astype(float)

    def copy(self) -> "NocsMap":
        return NocsMap(self.coords.copy(), self.mask.copy(), self.view)


def smooth_nocs_map(m: NocsMap, radius: int) -> NocsMap:
    """Mask-aware box average of the coordinate channels.

    The coordinate field of a surface is spatially smooth while per-pixel
    prediction noise is not, so a normalized box filter over the masked
    region cuts the noise std roughly by the kernel width while barely
    moving the field. Off-mask pixels contribute nothing (the kernel is
    renormalized by the masked-pixel count under it), the mask itself is
    unchanged, and radius 0 is the identity.
    """
    if radius <= 0:
        return m
    from scipy.ndimage import uniform_filter

    size = 2 * radius + 1
    w = m.mask.astype(np.float64)
    den = uniform_filter(w, size=size, mode="constant")
    out = np.zeros((m.height, m.width, 3))
    valid = m.mask & (den > 0)
    for c in range(3):
        num = uniform_filter(m.coords[..., c].astype(np.float64) * w, size=size, mode="constant")
        out[..., c] = np.where(valid, num / np.maximum(den, 1e-12), 0.0)
    return NocsMap(out.astype(np.float32), m.mask.copy(), m.view)


def _render_hit_fields(mesh_nocs: TriangleMesh, pose: Pose, K: CameraIntrinsics):
    """Cast one ray per pixel center; return per-pixel nearest/farthest hit data.

    Triangles are binned into 2D image tiles so each pixel only tests
    triangles whose screen bbox overlaps its tile.

    Returns (mask, t_near, t_far, nocs_near, nocs_far); distances are metric
    because the mesh is transformed into the camera frame first.
    """
    cam_mesh = mesh_nocs.transformed(pose)
    H, W = K.height, K.width
    v0, v1, v2 = cam_mesh.triangle_corners()
    e1 = v1 - v0
    e2 = v2 - v0
    nocs_v = cam_mesh.nocs_coords
    faces = cam_mesh.faces

    # Screen-space bbox per triangle (conservative: skip z<=eps vertices by
    # clamping; objects are required to be fully in front of the camera).
    z = np.stack([v0[:, 2], v1[:, 2], v2[:, 2]], axis=1)
    if np.any(z <= HIT_T_EPS):
        raise ValueError("mesh must lie fully in front of the camera")
    us = np.stack([v[:, 0] / v[:, 2] * K.fx + K.cx for v in (v0, v1, v2)], axis=1)
    vs = np.stack([v[:, 1] / v[:, 2] * K.fy + K.cy for v in (v0, v1, v2)], axis=1)

    tile = 16
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    tx0 = np.clip(np.floor(us.min(axis=1)).astype(int) // tile, 0, ntx - 1)
    tx1 = np.clip(np.ceil(us.max(axis=1)).astype(int) // tile, 0, ntx - 1)
    ty0 = np.clip(np.floor(vs.min(axis=1)).astype(int) // tile, 0, nty - 1)
    ty1 = np.clip(np.ceil(vs.max(axis=1)).astype(int) // tile, 0, nty - 1)
    # Cull triangles entirely offscreen.
    on = (us.max(axis=1) >= 0) & (us.min(axis=1) <= W - 1) & (vs.max(axis=1) >= 0) & (vs.min(axis=1) <= H - 1)

    tiles: dict[tuple[int, int], list[int]] = {}
    for i in np.nonzero(on)[0]:
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                tiles.setdefault((ty, tx), []).append(i)

    mask = np.zeros((H, W), dtype=bool)
    t_near = np.full((H, W), np.inf)
    t_far = np.full((H, W), -np.inf)
    nocs_near = np.zeros((H, W, 3))
    nocs_far = np.zeros((H, W, 3))

    for (ty, tx), tri_ids in tiles.items():
        tri = np.array(tri_ids)
        y0, y1 = ty * tile, min((ty + 1) * tile, H)
        x0, x1 = tx * tile, min((tx + 1) * tile, W)
        uu, vv = np.meshgrid(np.arange(x0, x1, dtype=float), np.arange(y0, y1, dtype=float))
        dirs = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
        dirs = dirs.reshape(-1, 3)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        R = dirs.shape[0]

        tv0, te1, te2 = v0[tri], e1[tri], e2[tri]
        pvec = np.cross(dirs[:, None, :], te2[None, :, :])  # (R, T, 3)
        det = np.einsum("rtk,tk->rt", pvec, te1)
        ok = np.abs(det) > 1e-14
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = -tv0  # ray origin is the camera center
        uq = np.einsum("rtk,tk->rt", pvec, tvec) * inv_det
        qvec = np.cross(tvec, te1)  # (T, 3)
        vq = np.einsum("rk,tk->rt", dirs, qvec) * inv_det
        tt = np.einsum("tk,tk->t", te2, qvec) * inv_det
        eps = 1e-12
        valid = ok & (uq >= -eps) & (vq >= -eps) & (uq + vq <= 1.0 + eps) & (tt > HIT_T_EPS)
        if not valid.any():
            continue

        t_big = np.where(valid, tt, np.inf)
        t_small = np.where(valid, tt, -np.inf)
        near_j = np.argmin(t_big, axis=1)
        far_j = np.argmax(t_small, axis=1)
        any_hit = valid.any(axis=1)
        r_idx = np.nonzero(any_hit)[0]
        if r_idx.size == 0:
            continue

        def gather(j_sel, rsel):
            tri_sel = tri[j_sel]
            f = faces[tri_sel]
            w1 = uq[rsel, j_sel]
            w2 = vq[rsel, j_sel]
            w0 = 1.0 - w1 - w2
            return (
                tt[rsel, j_sel],
                w0[:, None] * nocs_v[f[:, 0]] + w1[:, None] * nocs_v[f[:, 1]] + w2[:, None] * nocs_v[f[:, 2]],
            )

        tn, cn = gather(near_j[r_idx], r_idx)
        tf, cf = gather(far_j[r_idx], r_idx)

        rows = y0 + (r_idx // (x1 - x0))
        cols = x0 + (r_idx % (x1 - x0))
        better_n = tn < t_near[rows, cols]
        better_f = tf > t_far[rows, cols]
        rn, cn_cols = rows[better_n], cols[better_n]
        t_near[rn, cn_cols] = tn[better_n]
        nocs_near[rn, cn_cols] = cn[better_n]
        rf, cf_cols = rows[better_f], cols[better_f]
        t_far[rf, cf_cols] = tf[better_f]
        nocs_far[rf, cf_cols] = cf[better_f]
        mask[rows, cols] = True

    return mask, t_near, t_far, nocs_near, nocs_far


def render_front_nocs(mesh_nocs: TriangleMesh, pose: Pose, K: CameraIntrinsics) -> NocsMap:
    """Front-view NOCS map: nearest surface hit per pixel-center ray."""
    mask, _, _, nocs_near, _ = _render_hit_fields(mesh_nocs, pose, K)
    return NocsMap(nocs_near.astype(np.float32), mask, VIEW_FRONT)


def render_back_nocs(mesh_nocs: TriangleMesh, pose: Pose, K: CameraIntrinsics) -> NocsMap:
    """Back-view NOCS map: farthest surface hit per pixel-center ray."""
    mask, _, _, _, nocs_far = _render_hit_fields(mesh_nocs, pose, K)
    return NocsMap(nocs_far.astype(np.float32), mask, VIEW_BACK)


def render_front_back_nocs(
    mesh_nocs: TriangleMesh, pose: Pose, K: CameraIntrinsics
) -> tuple[NocsMap, NocsMap]:
    """Both views from a single casting pass (masks are identical by construction)."""
    mask, _, _, nocs_near, nocs_far = _render_hit_fields(mesh_nocs, pose, K)
    return (
        NocsMap(nocs_near.astype(np.float32), mask, VIEW_FRONT),
        NocsMap(nocs_far.astype(np.float32), mask.copy(), VIEW_BACK),
    )


def render_depth_extremes(
    mesh_nocs: TriangleMesh, pose: Pose, K: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mask, nearest-hit distance, farthest-hit distance) per pixel, in meters."""
    mask, t_near, t_far, _, _ = _render_hit_fields(mesh_nocs, pose, K)
    return mask, t_near, t_far


# ---------------------------------------------------------------------------
# NOCS map binary format
#
# Little-endian layout: magic "NOCS", version byte 0x01, u32 height,
# u32 width, u8 view tag (0 = front, 1 = back), height*width*3 float32
# (row-major, xyz interleaved), height*width u8 mask (0 or 255).
# ---------------------------------------------------------------------------

_VIEW_TO_TAG = {VIEW_FRONT: 0, VIEW_BACK: 1}
_TAG_TO_VIEW = {0: VIEW_FRONT, 1: VIEW_BACK}


def write_nocs_map(nmap: NocsMap, destination) -> None:
    """Write a map to a binary file path or file-like object."""
    payload = _encode_nocs_map(nmap)
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        with open(destination, "wb") as fh:
            fh.write(payload)


def _encode_nocs_map(nmap: NocsMap) -> bytes:
    head = MAP_MAGIC + struct.pack("<BIIB", MAP_VERSION, nmap.height, nmap.width, _VIEW_TO_TAG[nmap.view])
    coords = np.ascontiguousarray(nmap.coords, dtype="<f4").tobytes()
    mask = (nmap.mask.astype(np.uint8) * 255).tobytes()
    return head + coords + mask


def read_nocs_map(source) -> NocsMap:
    """Read a map written by write_nocs_map; bit-exact round trip."""
    if hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    return _decode_nocs_map(data)


def _decode_nocs_map(data: bytes) -> NocsMap:
    if len(data) < 4 or data[:4] != MAP_MAGIC:
        raise BadMagic("not a NOCS map file")
    if len(data) < 14:
        raise TruncatedFile("header is incomplete")
    version, height, width, tag = struct.unpack("<BIIB", data[4:14])
    if version != MAP_VERSION:
        raise VersionMismatch(f"unsupported version {version}")
    if tag not in _TAG_TO_VIEW:
        raise ValueError(f"unknown view tag {tag}")
    n = height * width
    expect = 14 + n * 12 + n
    if len(data) < expect:
        raise TruncatedFile(f"expected {expect} bytes, file has {len(data)}")
    coords = np.frombuffer(data, dtype="<f4", count=n * 3, offset=14).reshape(height, width, 3)
    mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=14 + n * 12).reshape(height, width)
    return NocsMap(coords.copy(), mask != 0, _TAG_TO_VIEW[tag])


# ---------------------------------------------------------------------------
# OBJ subset I/O: `v` and triangular `f` records only.
# ---------------------------------------------------------------------------


def read_obj(source) -> TriangleMesh:
    """Parse the OBJ subset; normals/texcoords/materials are ignored."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise ObjParseError(f"line {lineno}: vertex needs 3 coordinates")
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            refs = parts[1:]
            if len(refs) > 3:
                raise ObjParseError(f"line {lineno}: face has {len(refs)} vertices; only triangles are supported")
            if len(refs) < 3:
                raise ObjParseError(f"line {lineno}: face needs 3 vertices")
            ids = []
            for r in refs:
                tok = r.split("/")[0]
                i = int(tok)
                if i < 0:
                    i = len(verts) + 1 + i
                ids.append(i - 1)
            faces.append(ids)
        # vn / vt / usemtl / mtllib / o / g / s are ignored
    if not faces:
        raise ObjParseError("no triangular faces found")
    return TriangleMesh(np.array(verts), np.array(faces))


def write_obj(mesh: TriangleMesh, destination) -> None:
    buf = io.StringIO()
    for v in mesh.vertices:
        buf.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
    for f in mesh.faces:
        buf.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    text = buf.getvalue()
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        with open(destination, "w", encoding="utf-8") as fh:
            fh.write(text)
