import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from softproprio.geometry import RigidTransform, rotation_about_axis
from softproprio.renderer import (
    BinaryImage,
    CameraModel,
    MarkerPattern,
    RenderError,
    attach_markers,
    binarize,
    image_mse,
    make_pattern,
    render_binary,
)
from softproprio.scene import DIMENSION, SceneParams, half_widths, row_group
from softproprio.simulator import LoadCase, simulate


@pytest.fixture(scope="module")
def bent_mesh(spec):
    return simulate(spec, LoadCase(actuation_volume=20.0, external_force=(0, 10.0, 0)))


class TestPatterns:
    @pytest.mark.parametrize("kind,count", [("P1", 96), ("P2", 48), ("P3", 16), ("P4", 16)])
    def test_counts(self, kind, count):
        assert make_pattern(kind).count == count

    def test_p4_in_bending_plane(self):
        assert set(make_pattern("P4").angular_layout) == {0.0, 180.0}

    def test_p3_across_bending_plane(self):
        assert set(make_pattern("P3").angular_layout) == {90.0, 270.0}

    def test_p1_p2_evenly_spaced(self):
        for kind in ("P1", "P2"):
            angles = np.array(make_pattern(kind).angular_layout)
            np.testing.assert_allclose(np.diff(angles), 45.0)

    def test_unknown(self):
        with pytest.raises(RenderError):
            make_pattern("P9")

    def test_bad_diameter(self):
        with pytest.raises(RenderError):
            make_pattern("P1", marker_diameter=0.0)


class TestAnchors:
    def test_p2_stations(self, straight_mesh):
        ms = attach_markers(make_pattern("P2"), straight_mesh)
        assert len(ms) == 48
        assert len(np.unique(ms.s)) == 6

    def test_on_inner_wall(self, spec, straight_mesh):
        pts = attach_markers(make_pattern("P1"), straight_mesh).positions(straight_mesh)
        np.testing.assert_allclose(np.hypot(pts[:, 0], pts[:, 1]), spec.inner_radius, atol=1e-6)

    def test_follow_deformation(self, spec, straight_mesh, bent_mesh):
        pattern = MarkerPattern("P1", 2, 2, (10.0, 200.0), (33.3, 71.0))
        ms = attach_markers(pattern, straight_mesh)
        got = ms.positions(bent_mesh)
        grid = bent_mesh.vertices[bent_mesh.inner_vertex_ids]
        rows, sides = grid.shape[:2]
        for k in range(len(ms)):
            t = ms.s[k] / spec.length * (rows - 1)
            r0 = int(math.floor(t))
            fr = t - r0
            a = ms.phi[k] / 360.0 * sides
            c0 = int(math.floor(a))
            fc = a - c0
            c1 = (c0 + 1) % sides
            expect = ((1 - fr) * ((1 - fc) * grid[r0, c0] + fc * grid[r0, c1])
                      + fr * ((1 - fc) * grid[r0 + 1, c0] + fc * grid[r0 + 1, c1]))
            np.testing.assert_allclose(got[k], expect, atol=1e-9)

    def test_missing_parameterisation(self):
        with pytest.raises(RenderError):
            attach_markers(make_pattern("P1"), object())


class TestCamera:
    @pytest.mark.parametrize("kw", [dict(fov=0), dict(projection="pinhole", fov=180), dict(fov=190),
                                    dict(image_size=100), dict(image_size=8), dict(projection="ortho")])
    def test_invalid(self, kw):
        with pytest.raises(RenderError):
            CameraModel(**kw)

    def test_fisheye_equidistant(self):
        cam = CameraModel(fov=160, image_size=128)
        theta = math.radians(40)
        uv, ok = cam.project(np.array([[math.sin(theta), 0, math.cos(theta)]]))
        assert ok[0]
        assert uv[0, 0] - 64 == pytest.approx(cam.focal() * theta)


class TestRender:
    def test_empty_marker_set(self, straight_mesh):
        ms = attach_markers(MarkerPattern("P1", 0, 0, (), ()), straight_mesh)
        img = render_binary(CameraModel(image_size=64), ms, straight_mesh)
        assert img.pixels.sum() == 0

    def test_on_axis_disc_pinhole(self, straight_mesh):
        # collapse one inner ring onto the axis so a marker sits straight ahead at range 50
        grid_ids = straight_mesh.inner_vertex_ids
        verts = straight_mesh.vertices.copy()
        row = 32
        verts[grid_ids[row]] = [0.0, 0.0, straight_mesh.ring_s[row]]
        mesh = straight_mesh.with_vertices(verts)
        diameter, rng_ = 20.0, 50.0
        ms = attach_markers(MarkerPattern("P1", 1, 1, (0.0,), (rng_,), diameter), straight_mesh)
        cam = CameraModel("pinhole", 90.0, 64)
        img = render_binary(cam, ms, mesh).pixels
        f = 32 / math.tan(math.radians(45))
        radius = f * math.tan(math.atan(diameter / (2 * rng_)))
        c = np.arange(64) + 0.5 - 32
        u, v = np.meshgrid(c, c)
        expect = (np.hypot(u, v) <= radius).astype(np.uint8)
        np.testing.assert_array_equal(img, expect)
        assert img[32, 32] == 1

    def test_p2_components(self, straight_mesh):
        img = render_binary(CameraModel(), attach_markers(make_pattern("P2"), straight_mesh), straight_mesh)
        _, n = ndimage.label(img.pixels, structure=np.ones((3, 3)))
        assert 1 <= n <= 48

    def test_deterministic(self, bent_mesh, straight_mesh):
        ms = attach_markers(make_pattern("P1"), straight_mesh)
        cam = CameraModel(image_size=64)
        scene = SceneParams(np.random.default_rng(0).uniform(-0.5, 0.5, DIMENSION) * half_widths())
        assert render_binary(cam, ms, bent_mesh, scene) == render_binary(cam, ms, bent_mesh, scene)

    def test_camera_outside(self, straight_mesh):
        cam = CameraModel(pose=RigidTransform(np.eye(3), [30.0, 0, 0]))
        with pytest.raises(RenderError, match="outside"):
            render_binary(cam, attach_markers(make_pattern("P2"), straight_mesh), straight_mesh)

    def test_marker_behind_camera_skipped(self, straight_mesh):
        ms = attach_markers(make_pattern("P2"), straight_mesh)
        flip = RigidTransform(rotation_about_axis([1, 0, 0], math.pi), [0, 0, 0])
        img = render_binary(CameraModel("pinhole", 90.0, 64, flip), ms, straight_mesh)
        assert img.pixels.sum() == 0

    @pytest.mark.parametrize("k", [1, 3, 8])
    def test_rotation_invariance_exact(self, straight_mesh, k):
        ms = attach_markers(make_pattern("P1"), straight_mesh)
        deg = 360.0 / straight_mesh.sides * k
        rot = rotation_about_axis([0, 0, 1], math.radians(deg))
        base = render_binary(CameraModel(image_size=64), ms, straight_mesh)
        turned = render_binary(CameraModel(image_size=64, pose=RigidTransform(rot, np.zeros(3))),
                               ms.rotated(deg), straight_mesh)
        assert image_mse(base, turned) == 0.0

    def test_rotation_invariance_off_grid(self, straight_mesh):
        ms = attach_markers(make_pattern("P2"), straight_mesh)
        deg = 7.0
        rot = rotation_about_axis([0, 0, 1], math.radians(deg))
        base = render_binary(CameraModel(image_size=128), ms, straight_mesh)
        turned = render_binary(CameraModel(image_size=128, pose=RigidTransform(rot, np.zeros(3))),
                               ms.rotated(deg), straight_mesh)
        assert image_mse(base, turned) <= 0.005

    @given(st.floats(0.0, 0.9), st.floats(0.0, 0.9))
    def test_monotone_visibility(self, d1, d2):
        from softproprio.simulator import ActuatorSpec, undeformed_mesh

        mesh = undeformed_mesh(ActuatorSpec())
        ms = attach_markers(make_pattern("P2"), mesh)
        lo, hi = sorted((d1, d2))
        v = np.zeros(DIMENSION)
        v[0] = lo
        small = render_binary(CameraModel(image_size=64), ms, mesh, SceneParams(v)).pixels
        v[0] = hi
        big = render_binary(CameraModel(image_size=64), ms, mesh, SceneParams(v)).pixels
        assert np.all(big >= small)

    @pytest.mark.parametrize("kind", ["P1", "P2"])
    def test_mirror_symmetry(self, straight_mesh, kind):
        img = render_binary(CameraModel(image_size=128), attach_markers(make_pattern(kind), straight_mesh),
                            straight_mesh).pixels
        # y -> -y in the camera frame flips image rows
        assert image_mse(img, img[::-1, :]) < 0.005
        assert image_mse(img, img[:, ::-1]) < 0.005

    def test_occlusion_in_bent_tube(self, spec, straight_mesh):
        ms = attach_markers(make_pattern("P1"), straight_mesh)
        mesh = simulate(spec, LoadCase(actuation_volume=30.0))
        cam = CameraModel(image_size=64)
        img = render_binary(cam, ms, mesh).pixels
        # a strongly bent tube hides distal markers on the outside of the bend
        from softproprio.renderer import _segment_hits

        world = ms.positions(mesh)
        hits = _segment_hits(np.zeros(3), world, mesh, np.full(len(world), 0.02))
        assert hits.any() and not hits.all()
        assert img.sum() > 0


class TestBinarize:
    def test_zero(self):
        assert binarize(np.zeros((8, 8))).pixels.sum() == 0

    def test_two_level(self):
        g = np.full((8, 8), 40.0)
        g[2:5, 3:6] = 200
        np.testing.assert_array_equal(binarize(g).pixels, (g == 200).astype(np.uint8))

    def test_fixed_threshold_inclusive(self):
        g = np.array([[99.0, 100.0, 101.0]])
        np.testing.assert_array_equal(binarize(g, 100).pixels, [[0, 1, 1]])

    def test_noise_robustness(self, straight_mesh):
        ms = attach_markers(make_pattern("P1"), straight_mesh)
        clean = render_binary(CameraModel(image_size=128), ms, straight_mesh).pixels
        gray = np.where(clean == 1, 220.0, 30.0)
        noisy = np.clip(gray + np.random.default_rng(0).normal(0, 10, gray.shape), 0, 255)
        assert image_mse(binarize(noisy), binarize(gray)) < 0.01


class TestImageMse:
    def test_examples(self, rng):
        a = BinaryImage(np.zeros((256, 256), dtype=np.uint8))
        assert image_mse(a, a) == 0.0
        assert image_mse(a, BinaryImage(np.ones((256, 256), dtype=np.uint8))) == 1.0
        flipped = np.zeros(256 * 256, dtype=np.uint8)
        flipped[rng.choice(flipped.size, 64, replace=False)] = 1
        assert image_mse(a, BinaryImage(flipped.reshape(256, 256))) == 64 / 65536

    def test_size_mismatch(self):
        with pytest.raises(RenderError):
            image_mse(BinaryImage.zeros(16), BinaryImage.zeros(32))

    def test_pgm_round_trip(self, tmp_path, rng):
        img = BinaryImage((rng.random((32, 32)) > 0.5).astype(np.uint8))
        img.save(tmp_path / "x.pgm")
        assert BinaryImage.load(tmp_path / "x.pgm") == img


class TestSceneParams:
    def test_dimension(self):
        assert DIMENSION == 32
        with pytest.raises(ValueError):
            SceneParams(np.zeros(31))

    def test_bounds(self):
        hw = half_widths()
        assert list(hw[:8]) == [1, 5, 2, 2, 2, 5, 5, 5]
        assert list(hw[8:12]) == [2, 5, 2, 0.5]
        assert SceneParams.clamped(hw * 3).within_bounds()

    def test_row_groups(self):
        assert [row_group(r, 6) for r in range(6)] == list(range(6))
        assert [row_group(r, 12) for r in range(12)] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5]
        assert max(row_group(r, 8) for r in range(8)) == 5

    def test_named_fields(self):
        v = np.arange(32, dtype=float)
        p = SceneParams(v)
        assert p.marker_diameter_delta == 0 and p.camera_fov_delta == 1
        assert p.row(1) == {"axial_offset": 12, "angular_offset": 13, "spacing_delta": 14, "radial_depth_delta": 15}
