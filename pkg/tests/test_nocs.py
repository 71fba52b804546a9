"""Mesh normalization, ray casting, NOCS map rendering, and file formats."""

import io

import numpy as np
import pytest

from stereonocs.geometry import CameraIntrinsics, Pose, Rotation
from stereonocs.nocs import (
    BadMagic,
    DegenerateMesh,
    NocsMap,
    ObjParseError,
    Ray,
    TriangleMesh,
    TruncatedFile,
    VersionMismatch,
    normalize_mesh_to_nocs,
    ray_mesh_intersections,
    read_nocs_map,
    read_obj,
    render_back_nocs,
    render_depth_extremes,
    render_front_back_nocs,
    render_front_nocs,
    smooth_nocs_map,
    write_nocs_map,
    write_obj,
)
from stereonocs.harness.meshes import generate_parametric_mesh


def unit_cube_mesh() -> TriangleMesh:
    """[0,1]^3 cube, 12 triangles."""
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    faces = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # x = 0
            [4, 6, 7], [4, 7, 5],  # x = 1
            [0, 4, 5], [0, 5, 1],  # y = 0
            [2, 3, 7], [2, 7, 6],  # y = 1
            [0, 2, 6], [0, 6, 4],  # z = 0
            [1, 5, 7], [1, 7, 3],  # z = 1
        ]
    )
    return TriangleMesh(corners, faces)


def uv_sphere(n_theta: int = 16, n_phi: int = 24) -> TriangleMesh:
    """Unit sphere centered at the origin, poles on the z axis."""
    verts = [np.array([0.0, 0.0, 1.0])]
    for i in range(1, n_theta):
        theta = np.pi * i / n_theta
        for j in range(n_phi):
            phi = 2.0 * np.pi * j / n_phi
            verts.append(
                np.array(
                    [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]
                )
            )
    verts.append(np.array([0.0, 0.0, -1.0]))
    bottom = len(verts) - 1
    ring = lambda r: 1 + r * n_phi
    faces = []
    for j in range(n_phi):
        faces.append([0, ring(0) + j, ring(0) + (j + 1) % n_phi])
        faces.append([bottom, ring(n_theta - 2) + (j + 1) % n_phi, ring(n_theta - 2) + j])
    for r in range(n_theta - 2):
        for j in range(n_phi):
            a = ring(r) + j
            b = ring(r) + (j + 1) % n_phi
            c = ring(r + 1) + j
            d = ring(r + 1) + (j + 1) % n_phi
            faces.append([a, b, c])
            faces.append([b, d, c])
    return TriangleMesh(np.array(verts), np.array(faces))


class TestNormalization:
    def test_unit_cube_lands_centered_with_diagonal_one(self):
        nocs, norm = normalize_mesh_to_nocs(unit_cube_mesh())
        lo, hi = nocs.bbox()
        side = 1.0 / np.sqrt(3.0)
        np.testing.assert_allclose((lo + hi) / 2, [0.5, 0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(hi - lo, [side, side, side], atol=1e-12)
        assert np.linalg.norm(hi - lo) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(norm.center, [0.5, 0.5, 0.5], atol=1e-12)
        assert norm.diagonal == pytest.approx(np.sqrt(3.0), abs=1e-12)

    def test_normalization_is_idempotent(self):
        nocs, _ = normalize_mesh_to_nocs(unit_cube_mesh())
        again, norm2 = normalize_mesh_to_nocs(nocs)
        np.testing.assert_allclose(again.vertices, nocs.vertices, atol=1e-12)
        assert norm2.diagonal == pytest.approx(1.0, abs=1e-12)

    def test_parametric_bottle_diagonal_is_one(self):
        mesh = generate_parametric_mesh("bottle", rng=np.random.default_rng(0))
        nocs, norm = normalize_mesh_to_nocs(mesh)
        lo, hi = nocs.bbox()
        assert np.linalg.norm(hi - lo) == pytest.approx(1.0, abs=1e-12)
        # Recorded mapping inverts the normalization exactly.
        np.testing.assert_allclose(norm.to_metric(nocs.vertices), mesh.vertices, atol=1e-12)
        np.testing.assert_allclose(norm.to_nocs(mesh.vertices), nocs.vertices, atol=1e-12)

    def test_degenerate_mesh_rejected(self):
        point = np.zeros((3, 3))
        with pytest.raises(DegenerateMesh):
            normalize_mesh_to_nocs(TriangleMesh(point, np.array([[0, 1, 2]])))


class TestRayCasting:
    def test_polar_ray_hits_sphere_at_exact_chord(self):
        sphere = uv_sphere()
        for d in (2.0, 3.5, 10.0):
            ray = Ray(np.array([0.0, 0.0, -d]), np.array([0.0, 0.0, 1.0]))
            hits = ray_mesh_intersections(ray, sphere)
            np.testing.assert_allclose(hits.distances, [d - 1.0, d + 1.0], atol=1e-9)

    def test_generic_chord_within_tessellation_error(self):
        sphere = uv_sphere(n_theta=32, n_phi=64)
        rng = np.random.default_rng(1)
        # Max sagitta of a ring step bounds how far facets sit inside the sphere.
        sagitta = 1.0 - np.cos(np.pi / 32)
        for _ in range(10):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            d = rng.uniform(2.0, 6.0)
            ray = Ray(-d * direction, direction)
            hits = ray_mesh_intersections(ray, sphere)
            assert len(hits) == 2
            assert hits.distances[0] == pytest.approx(d - 1.0, abs=3 * sagitta)
            assert hits.distances[1] == pytest.approx(d + 1.0, abs=3 * sagitta)

    def test_miss_returns_empty(self):
        sphere = uv_sphere()
        ray = Ray(np.array([0.0, 0.0, -3.0]), np.array([0.0, 0.0, -1.0]))
        assert len(ray_mesh_intersections(ray, sphere)) == 0
        side = Ray(np.array([0.0, 5.0, -3.0]), np.array([0.0, 0.0, 1.0]))
        assert len(ray_mesh_intersections(side, sphere)) == 0

    def test_hitlist_ordering_and_accessors(self):
        sphere = uv_sphere()
        ray = Ray(np.array([0.0, 0.0, -3.0]), np.array([0.0, 0.0, 1.0]))
        hits = ray_mesh_intersections(ray, sphere)
        d = hits.distances
        assert np.all(np.diff(d) > 0)
        assert hits.nearest().distance == d[0]
        assert hits.farthest().distance == d[-1]
        for h in hits:
            np.testing.assert_allclose(
                h.point, ray.origin + h.distance * ray.direction, atol=1e-12
            )

    def test_against_brute_force_triangle_loop(self):
        """Prefiltered caster agrees with an exhaustive per-triangle oracle."""
        mesh = uv_sphere(n_theta=8, n_phi=12)
        v0, v1, v2 = mesh.triangle_corners()
        e1, e2 = v1 - v0, v2 - v0

        def brute_force(origin, direction):
            pvec = np.cross(direction, e2)
            det = np.einsum("ij,ij->i", e1, pvec)
            ok = np.abs(det) > 1e-14
            inv = np.zeros_like(det)
            inv[ok] = 1.0 / det[ok]
            tvec = origin - v0
            u = np.einsum("ij,ij->i", tvec, pvec) * inv
            qvec = np.cross(tvec, e1)
            v = (qvec @ direction) * inv
            t = np.einsum("ij,ij->i", e2, qvec) * inv
            eps = 1e-12
            good = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t > 1e-9)
            ts = np.sort(t[good])
            merged = []
            last = -np.inf
            for tk in ts:
                if tk - last > 1e-9:
                    merged.append(tk)
                    last = tk
            return np.array(merged)

        rng = np.random.default_rng(2)
        n_rays = 10_000
        origins = rng.normal(size=(n_rays, 3))
        origins *= 2.5 / np.linalg.norm(origins, axis=1, keepdims=True)
        targets = rng.uniform(-1.2, 1.2, size=(n_rays, 3))
        hit_count = 0
        for o, tgt in zip(origins, targets):
            direction = tgt - o
            direction /= np.linalg.norm(direction)
            got = ray_mesh_intersections(Ray(o, direction), mesh).distances
            want = brute_force(o, direction)
            assert len(got) == len(want)
            np.testing.assert_allclose(got, want, atol=1e-9)
            hit_count += len(want) > 0
        # The sample must actually exercise both hit and miss paths.
        assert 0 < hit_count < n_rays


class TestRendering:
    K = CameraIntrinsics(fx=600.0, fy=600.0, cx=111.5, cy=111.5, width=224, height=224)

    def _scene(self, seed=0):
        rng = np.random.default_rng(seed)
        mesh, _ = normalize_mesh_to_nocs(generate_parametric_mesh("bottle", rng=rng))
        pose = Pose(0.2, Rotation.rot_x(0.4).compose(Rotation.rot_y(1.1)), np.array([0.02, -0.01, 0.8]))
        return mesh, pose

    def test_masked_pixels_reproject_to_their_pixel(self):
        mesh, pose = self._scene()
        front = render_front_nocs(mesh, pose, self.K)
        assert front.mask.sum() > 200
        px, coords = front.masked_pixels()
        cam = pose.apply(coords)
        proj = np.stack(
            [
                self.K.fx * cam[:, 0] / cam[:, 2] + self.K.cx,
                self.K.fy * cam[:, 1] / cam[:, 2] + self.K.cy,
            ],
            axis=1,
        )
        err = np.abs(proj - px).max()
        assert err < 0.5

    def test_front_back_share_mask_and_order_depths(self):
        mesh, pose = self._scene()
        front, back = render_front_back_nocs(mesh, pose, self.K)
        assert front.view == "front" and back.view == "back"
        np.testing.assert_array_equal(front.mask, back.mask)
        mask, t_near, t_far = render_depth_extremes(mesh, pose, self.K)
        np.testing.assert_array_equal(mask, front.mask)
        assert np.all(t_far[mask] >= t_near[mask] - 1e-12)
        # A closed surface seen front-on has two distinct depths almost everywhere.
        assert np.mean(t_far[mask] > t_near[mask] + 1e-6) > 0.9

    def test_separate_renders_match_combined(self):
        mesh, pose = self._scene(seed=3)
        front, back = render_front_back_nocs(mesh, pose, self.K)
        np.testing.assert_array_equal(render_front_nocs(mesh, pose, self.K).coords, front.coords)
        np.testing.assert_array_equal(render_back_nocs(mesh, pose, self.K).coords, back.coords)

    def test_single_sheet_makes_back_equal_front(self):
        # One triangle: every ray has a single hit, so farthest == nearest.
        tri = TriangleMesh(
            np.array([[0.1, 0.1, 0.1], [0.9, 0.1, 0.5], [0.5, 0.9, 0.9]]),
            np.array([[0, 1, 2]]),
        )
        pose = Pose(0.3, Rotation.identity(), np.array([0.0, 0.0, 0.7]))
        front, back = render_front_back_nocs(tri, pose, self.K)
        assert front.mask.sum() > 0
        np.testing.assert_array_equal(front.coords, back.coords)
        np.testing.assert_array_equal(front.mask, back.mask)

    def test_background_coords_are_zero(self):
        mesh, pose = self._scene()
        front = render_front_nocs(mesh, pose, self.K)
        assert np.all(front.coords[~front.mask] == 0.0)


class TestMapIO:
    def _sample_map(self):
        rng = np.random.default_rng(4)
        coords = rng.uniform(size=(6, 5, 3)).astype(np.float32)
        mask = rng.uniform(size=(6, 5)) > 0.4
        return NocsMap(coords, mask, "back")

    def test_round_trip_is_bit_exact(self):
        nmap = self._sample_map()
        buf = io.BytesIO()
        write_nocs_map(nmap, buf)
        buf.seek(0)
        restored = read_nocs_map(buf)
        assert restored.view == nmap.view
        np.testing.assert_array_equal(restored.mask, nmap.mask)
        assert restored.coords.tobytes() == nmap.coords.tobytes()

    def test_round_trip_through_file(self, tmp_path):
        nmap = self._sample_map()
        path = tmp_path / "map.nocs"
        write_nocs_map(nmap, path)
        restored = read_nocs_map(path)
        assert restored.coords.tobytes() == nmap.coords.tobytes()

    def _encoded(self):
        buf = io.BytesIO()
        write_nocs_map(self._sample_map(), buf)
        return buf.getvalue()

    def test_bad_magic(self):
        data = b"JUNK" + self._encoded()[4:]
        with pytest.raises(BadMagic):
            read_nocs_map(io.BytesIO(data))

    def test_version_mismatch(self):
        data = bytearray(self._encoded())
        data[4] = 2
        with pytest.raises(VersionMismatch):
            read_nocs_map(io.BytesIO(bytes(data)))

    def test_truncated_header_and_payload(self):
        data = self._encoded()
        with pytest.raises(TruncatedFile):
            read_nocs_map(io.BytesIO(data[:10]))
        with pytest.raises(TruncatedFile):
            read_nocs_map(io.BytesIO(data[:-1]))


class TestObjIO:
    def test_round_trip_exact(self):
        mesh = uv_sphere(n_theta=6, n_phi=8)
        buf = io.StringIO()
        write_obj(mesh, buf)
        restored = read_obj(io.StringIO(buf.getvalue()))
        np.testing.assert_array_equal(restored.vertices, mesh.vertices)
        np.testing.assert_array_equal(restored.faces, mesh.faces)

    def test_ignores_comments_normals_and_slash_refs(self):
        text = (
            "# comment\n"
            "vn 0 0 1\n"
            "v 0 0 0\n"
            "v 1 0 0\n"
            "v 0 1 0\n"
            "f 1/1/1 2/2/1 3/3/1\n"
        )
        mesh = read_obj(io.StringIO(text))
        assert mesh.vertices.shape == (3, 3)
        np.testing.assert_array_equal(mesh.faces, [[0, 1, 2]])

    def test_negative_indices(self):
        text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n"
        mesh = read_obj(io.StringIO(text))
        np.testing.assert_array_equal(mesh.faces, [[0, 1, 2]])

    def test_parse_errors(self):
        with pytest.raises(ObjParseError):
            read_obj(io.StringIO("v 0 0\nf 1 1 1\n"))
        with pytest.raises(ObjParseError):
            read_obj(io.StringIO("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n"))
        with pytest.raises(ObjParseError):
            read_obj(io.StringIO("v 0 0 0\n"))


class TestSmoothing:
    def test_radius_zero_is_identity(self):
        rng = np.random.default_rng(5)
        nmap = NocsMap(rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8)) > 0.3, "front")
        out = smooth_nocs_map(nmap, 0)
        np.testing.assert_array_equal(out.coords, nmap.coords)
        np.testing.assert_array_equal(out.mask, nmap.mask)

    def test_constant_field_is_preserved_under_irregular_mask(self):
        rng = np.random.default_rng(6)
        mask = rng.uniform(size=(16, 16)) > 0.5
        coords = np.zeros((16, 16, 3), dtype=np.float32)
        coords[mask] = [0.25, 0.5, 0.75]
        nmap = NocsMap(coords, mask, "front")
        out = smooth_nocs_map(nmap, 2)
        np.testing.assert_array_equal(out.mask, mask)
        np.testing.assert_allclose(out.coords[mask], coords[mask], atol=1e-6)
        assert np.all(out.coords[~mask] == 0.0)

    def test_noise_is_attenuated_in_the_interior(self):
        rng = np.random.default_rng(7)
        sigma = 0.02
        mask = np.zeros((40, 40), dtype=bool)
        mask[4:36, 4:36] = True
        coords = np.full((40, 40, 3), 0.5, dtype=np.float32)
        coords[mask] += rng.normal(0, sigma, size=(coords[mask].shape)).astype(np.float32)
        out = smooth_nocs_map(NocsMap(coords, mask, "front"), 2)
        interior = np.zeros_like(mask)
        interior[8:32, 8:32] = True
        residual = out.coords[interior] - 0.5
        assert residual.std() < sigma / 3
