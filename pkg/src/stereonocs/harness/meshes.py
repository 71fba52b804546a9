"""Parametric watertight meshes for the three benchmark categories.

All meshes use +y as the up axis and meters as units. The bottle and cup are
closed surfaces of revolution about the y axis; the mug is a closed cylinder
body plus a torus-segment handle protruding along +x, each piece a closed
2-manifold on its own.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from ..nocs import TriangleMesh


class InvalidParams(ValueError):
    """Shape parameters outside the buildable range."""


@dataclass(frozen=True)
class BottleParams:
    body_radius: float = 0.035
    body_height: float = 0.14
    shoulder_height: float = 0.03
    neck_radius: float = 0.012
    neck_height: float = 0.04
    segments: int = 28

    def validate(self) -> None:
        if not (0 < self.neck_radius < self.body_radius):
            raise InvalidParams("need 0 < neck radius < body radius")
        if min(self.body_height, self.shoulder_height, self.neck_height) <= 0:
            raise InvalidParams("all heights must be positive")
        if self.segments < 3:
            raise InvalidParams("need at least 3 segments")

    @staticmethod
    def sample(rng: np.random.Generator) -> "BottleParams":
        body_r = rng.uniform(0.025, 0.05)
        return BottleParams(
            body_radius=body_r,
            body_height=rng.uniform(0.10, 0.20),
            shoulder_height=rng.uniform(0.02, 0.05),
            neck_radius=body_r * rng.uniform(0.25, 0.5),
            neck_height=rng.uniform(0.02, 0.06),
        )


@dataclass(frozen=True)
class CupParams:
    bottom_radius: float = 0.025
    top_radius: float = 0.04
    height: float = 0.1
    wall_thickness: float = 0.003
    floor_thickness: float = 0.005
    segments: int = 28

    def validate(self) -> None:
        if min(self.bottom_radius, self.top_radius, self.height) <= 0:
            raise InvalidParams("radii and height must be positive")
        if self.bottom_radius > self.top_radius:
            raise InvalidParams("cup must not narrow toward the top")
        if not 0 < self.wall_thickness < 0.8 * self.bottom_radius:
            raise InvalidParams("wall thickness must be positive and below the bottom radius")
        if not 0 < self.floor_thickness < 0.8 * self.height:
            raise InvalidParams("floor thickness must be positive and below the height")
        if self.segments < 3:
            raise InvalidParams("need at least 3 segments")

    @staticmethod
    def sample(rng: np.random.Generator) -> "CupParams":
        bottom = rng.uniform(0.02, 0.035)
        return CupParams(
            bottom_radius=bottom,
            top_radius=bottom * rng.uniform(1.1, 1.8),
            height=rng.uniform(0.07, 0.13),
            wall_thickness=rng.uniform(0.002, 0.004),
            floor_thickness=rng.uniform(0.004, 0.008),
        )


@dataclass(frozen=True)
class MugParams:
    radius: float = 0.04
    height: float = 0.095
    handle_arc_radius: float = 0.028
    handle_tube_radius: float = 0.007
    handle_span_deg: float = 220.0
    segments: int = 28
    handle_arc_segments: int = 14
    handle_tube_segments: int = 10

    def validate(self) -> None:
        if min(self.radius, self.height) <= 0:
            raise InvalidParams("radius and height must be positive")
        if not 0 < self.handle_tube_radius < self.handle_arc_radius:
            raise InvalidParams("handle tube must be thinner than its arc")
        if 2 * (self.handle_arc_radius + self.handle_tube_radius) >= self.height:
            raise InvalidParams("handle does not fit the body height")
        if not 60.0 <= self.handle_span_deg <= 300.0:
            raise InvalidParams("handle span must be between 60 and 300 degrees")
        if min(self.segments, self.handle_arc_segments, self.handle_tube_segments) < 3:
            raise InvalidParams("need at least 3 segments everywhere")

    @staticmethod
    def sample(rng: np.random.Generator) -> "MugParams":
        height = rng.uniform(0.08, 0.12)
        return MugParams(
            radius=rng.uniform(0.03, 0.045),
            height=height,
            handle_arc_radius=height * rng.uniform(0.25, 0.35),
            handle_tube_radius=rng.uniform(0.005, 0.008),
            handle_span_deg=rng.uniform(180.0, 250.0),
        )


def _revolve(profile: list[tuple[float, float]], segments: int) -> TriangleMesh:
    """Closed surface of revolution about +y from an (r, y) polyline.

    The polyline must start and end on the axis (r = 0) with r > 0 in
    between; axis endpoints become single vertices joined to the adjacent
    ring by triangle fans, so every edge ends up shared by exactly two
    triangles.
    """
    if len(profile) < 3 or profile[0][0] != 0.0 or profile[-1][0] != 0.0:
        raise InvalidParams("profile must start and end on the axis")
    interior = profile[1:-1]
    if any(r <= 0 for r, _ in interior):
        raise InvalidParams("interior profile radii must be positive")

    theta = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    verts = [np.array([0.0, profile[0][1], 0.0])]
    ring_start = []
    for r, y in interior:
        ring_start.append(len(verts))
        for c, s in zip(cos_t, sin_t):
            verts.append(np.array([r * c, y, r * s]))
    top = len(verts)
    verts.append(np.array([0.0, profile[-1][1], 0.0]))

    faces = []
    first = ring_start[0]
    for k in range(segments):
        faces.append([0, first + k, first + (k + 1) % segments])
    for a, b in zip(ring_start[:-1], ring_start[1:]):
        for k in range(segments):
            k2 = (k + 1) % segments
            faces.append([a + k, b + k, b + k2])
            faces.append([a + k, b + k2, a + k2])
    last = ring_start[-1]
    for k in range(segments):
        faces.append([top, last + (k + 1) % segments, last + k])

    return TriangleMesh(np.array(verts), np.array(faces))


def _bottle(p: BottleParams) -> TriangleMesh:
    p.validate()
    h_body = p.body_height
    h_shoulder = h_body + p.shoulder_height
    h_total = h_shoulder + p.neck_height
    mid_r = (p.body_radius + p.neck_radius) / 2.0
    profile = [
        (0.0, 0.0),
        (p.body_radius, 0.0),
        (p.body_radius, h_body),
        (mid_r, (h_body + h_shoulder) / 2.0),
        (p.neck_radius, h_shoulder),
        (p.neck_radius, h_total),
        (0.0, h_total),
    ]
    return _revolve(profile, p.segments)


def _cup(p: CupParams) -> TriangleMesh:
    p.validate()
    # Inner wall parallels the outer cone, inset by the wall thickness;
    # the loop runs bottom center -> outer wall -> rim -> inner wall ->
    # inner floor -> axis, closing the solid.
    slope = (p.top_radius - p.bottom_radius) / p.height
    inner_floor_r = p.bottom_radius + slope * p.floor_thickness - p.wall_thickness
    if inner_floor_r <= 0:
        raise InvalidParams("wall thickness leaves no inner cavity")
    profile = [
        (0.0, 0.0),
        (p.bottom_radius, 0.0),
        (p.top_radius, p.height),
        (p.top_radius - p.wall_thickness, p.height),
        (inner_floor_r, p.floor_thickness),
        (0.0, p.floor_thickness),
    ]
    return _revolve(profile, p.segments)


def _mug(p: MugParams) -> TriangleMesh:
    p.validate()
    body = _revolve(
        [(0.0, 0.0), (p.radius, 0.0), (p.radius, p.height), (0.0, p.height)],
        p.segments,
    )

    # Handle: a tube swept along a vertical arc in the x-y plane, centered on
    # the body wall so both tube ends are buried inside the body. Arc angle 0
    # points along +x (outward).
    half = np.radians(p.handle_span_deg) / 2.0
    arc = np.linspace(-half, half, p.handle_arc_segments + 1)
    center = np.array([p.radius - 0.25 * p.handle_tube_radius, p.height / 2.0, 0.0])

    na = len(arc)
    nt = p.handle_tube_segments
    phi = np.linspace(0.0, 2.0 * np.pi, nt, endpoint=False)
    verts = []
    for ang in arc:
        # Arc point and its local frame: radial (in-plane) and z (out of plane).
        radial = np.array([np.cos(ang), np.sin(ang), 0.0])
        point = center + p.handle_arc_radius * radial
        out_of_plane = np.array([0.0, 0.0, 1.0])
        for ph in phi:
            verts.append(point + p.handle_tube_radius * (np.cos(ph) * radial + np.sin(ph) * out_of_plane))
    start_cap = len(verts)
    verts.append(center + p.handle_arc_radius * np.array([np.cos(arc[0]), np.sin(arc[0]), 0.0]))
    end_cap = len(verts)
    verts.append(center + p.handle_arc_radius * np.array([np.cos(arc[-1]), np.sin(arc[-1]), 0.0]))

    faces = []
    for i in range(na - 1):
        for k in range(nt):
            k2 = (k + 1) % nt
            a, b = i * nt, (i + 1) * nt
            faces.append([a + k, b + k, b + k2])
            faces.append([a + k, b + k2, a + k2])
    for k in range(nt):
        k2 = (k + 1) % nt
        faces.append([start_cap, k2, k])
        faces.append([end_cap, (na - 1) * nt + k, (na - 1) * nt + k2])

    handle = TriangleMesh(np.array(verts), np.array(faces))
    merged_verts = np.vstack([body.vertices, handle.vertices])
    merged_faces = np.vstack([body.faces, handle.faces + len(body.vertices)])
    return TriangleMesh(merged_verts, merged_faces)


_BUILDERS = {"bottle": (_bottle, BottleParams), "cup": (_cup, CupParams), "mug": (_mug, MugParams)}
CATEGORIES = tuple(_BUILDERS)


def generate_parametric_mesh(category: str, params=None, rng: np.random.Generator | None = None) -> TriangleMesh:
    """Build a category mesh; params are sampled from the category ranges
    when not given (rng required in that case)."""
    if category not in _BUILDERS:
        raise InvalidParams(f"unknown category {category!r}; choose from {sorted(_BUILDERS)}")
    builder, params_cls = _BUILDERS[category]
    if params is None:
        if rng is None:
            rng = np.random.default_rng(0)
        params = params_cls.sample(rng)
    if not isinstance(params, params_cls):
        raise InvalidParams(f"{category} expects {params_cls.__name__}, got {type(params).__name__}")
    return builder(params)


def edge_audit(mesh: TriangleMesh) -> Counter:
    """Histogram of how many triangles share each undirected edge."""
    counts: Counter = Counter()
    for f in mesh.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            counts[(min(a, b), max(a, b))] += 1
    return Counter(counts.values())


def is_watertight(mesh: TriangleMesh) -> bool:
    """True when every undirected edge is shared by exactly two triangles."""
    hist = edge_audit(mesh)
    return set(hist) == {2}
