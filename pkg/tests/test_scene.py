import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from suctionrl import scene as sc


def brute_force_overlap_area(a, b, samples=220):
    """Grid-sampled footprint overlap area between two objects (oracle)."""
    ax, ay = a.bbox_half_extents()
    bx, by = b.bbox_half_extents()
    x0 = min(a.x - ax, b.x - bx)
    x1 = max(a.x + ax, b.x + bx)
    y0 = min(a.y - ay, b.y - by)
    y1 = max(a.y + ay, b.y + by)
    xs = np.linspace(x0, x1, samples)
    ys = np.linspace(y0, y1, samples)
    X, Y = np.meshgrid(xs, ys)
    both = np.asarray(sc.contains(a, X, Y)) & np.asarray(sc.contains(b, X, Y))
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
    return float(both.sum()) * cell


class TestSpawnScattered:
    def test_empty(self):
        scene = sc.spawn_scattered(0, 0.05, 7)
        assert len(scene) == 0

    def test_determinism(self):
        a = sc.spawn_scattered(10, 0.05, 42)
        b = sc.spawn_scattered(10, 0.05, 42)
        assert a.objects == b.objects

    def test_no_pairwise_overlap(self):
        scene = sc.spawn_scattered(10, 0.05, 42)
        objs = scene.objects
        for i in range(len(objs)):
            for j in range(i + 1, len(objs)):
                assert brute_force_overlap_area(objs[i], objs[j]) == 0.0

    def test_inside_workspace(self):
        scene = sc.spawn_scattered(12, 0.05, 3)
        for obj in scene.objects:
            hx, hy = obj.bbox_half_extents()
            assert 0 <= obj.x - hx and obj.x + hx <= scene.workspace_side
            assert 0 <= obj.y - hy and obj.y + hy <= scene.workspace_side

    def test_bad_size_rejected(self):
        with pytest.raises(ValueError):
            sc.spawn_scattered(3, 0.3, 1)

    def test_crowded_workspace_cannot_place(self):
        with pytest.raises(sc.PlacementError, match="cannot place"):
            sc.spawn_scattered(120, 0.05, 1)


class TestSpawnEnvironment:
    def test_env1_towers_aligned(self):
        scene = sc.spawn_environment(sc.ENV_FULLY_STACKED, 3)
        uppers = [o for o in scene.objects if o.base_z > 0]
        assert uppers
        for upper in uppers:
            support = next(
                o for o in scene.objects if o.id != upper.id and abs(o.top - upper.base_z) < 1e-9
            )
            assert upper.x == support.x and upper.y == support.y

    def test_env2_offset_uppers(self):
        scene = sc.spawn_environment(sc.ENV_HALF_STACKED, 3)
        size = 0.05
        offsets = []
        for upper in (o for o in scene.objects if o.base_z > 0):
            lower = next(
                o
                for o in scene.objects
                if o.base_z == 0 and abs(o.top - upper.base_z) < 1e-9
                and sc.footprint_gap(o, upper) == 0.0
            )
            offsets.append(math.hypot(upper.x - lower.x, upper.y - lower.y))
        assert any(d >= 0.4 * size for d in offsets)

    def test_env3_contains_novel_shapes(self):
        scene = sc.spawn_environment(sc.ENV_HALF_STACKED_NOVEL, 3)
        shapes = {o.shape for o in scene.objects}
        assert sc.CYLINDER in shapes and sc.L_BLOCK in shapes

    def test_determinism_and_validity(self):
        for kind in sc.ENV_KINDS:
            a = sc.spawn_environment(kind, 11)
            b = sc.spawn_environment(kind, 11)
            assert a.objects == b.objects
            sc.validate_scene(a)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown environment"):
            sc.spawn_environment("env9", 0)


class TestTopHeight:
    def test_empty_scene(self):
        scene = sc.Scene(())
        assert sc.top_height_at(scene, 0.2, 0.2) == 0.0

    def test_single_cube(self):
        obj = sc.SceneObject(0, sc.BOX, (0.025, 0.025), 0.05, 0.2, 0.2)
        scene = sc.Scene((obj,))
        assert sc.top_height_at(scene, 0.2, 0.2) == 0.05

    def test_stacked_cubes_additive(self):
        lower = sc.SceneObject(0, sc.BOX, (0.025, 0.025), 0.05, 0.2, 0.2)
        upper = sc.SceneObject(1, sc.BOX, (0.025, 0.025), 0.05, 0.2, 0.2, base_z=0.05)
        scene = sc.Scene((lower, upper))
        assert sc.top_height_at(scene, 0.2, 0.2) == pytest.approx(0.10)

    def test_out_of_bounds(self):
        scene = sc.Scene(())
        with pytest.raises(sc.OutOfBoundsError, match="out of bounds"):
            sc.top_height_at(scene, 0.5, 0.2)


def _single_cube_scene(x=0.2, y=0.2, size=0.05):
    half = size / 2
    return sc.Scene((sc.SceneObject(0, sc.BOX, (half, half), size, x, y),))


class TestExecuteSuction:
    def test_center_hit_both_fidelities(self):
        for fidelity in ("sim", "real"):
            outcome, after = sc.execute_suction(_single_cube_scene(), 0.2, 0.2, 0.05, fidelity)
            assert outcome.success and not outcome.collision
            assert outcome.center_distance == 0.0
            assert len(after) == 0

    def test_edge_suction_sim_vs_real(self):
        # Cup center on the face but cup half off the edge.
        x = 0.2 + 0.025 - 0.002
        sim_out, _ = sc.execute_suction(_single_cube_scene(), x, 0.2, 0.05, "sim")
        real_out, real_scene = sc.execute_suction(_single_cube_scene(), x, 0.2, 0.05, "real")
        assert sim_out.success
        assert not real_out.success and real_out.contacted_object == 0
        assert real_out.center_distance == pytest.approx(0.023)
        assert len(real_scene) == 1

    def test_half_stacked_lower_target_collides(self):
        lower = sc.SceneObject(0, sc.BOX, (0.025, 0.025), 0.05, 0.2, 0.2)
        upper = sc.SceneObject(1, sc.BOX, (0.025, 0.025), 0.05, 0.225, 0.2, base_z=0.05)
        scene = sc.Scene((lower, upper))
        # Exposed strip of the lower cube: upper cube is within the body radius
        # and taller than the descent corridor.
        outcome, after = sc.execute_suction(scene, 0.185, 0.2, 0.05, "sim")
        assert outcome.collision and not outcome.success
        assert after is scene

    def test_no_contact_far_above(self):
        outcome, _ = sc.execute_suction(_single_cube_scene(), 0.2, 0.2, 0.2, "sim")
        assert not outcome.success and not outcome.collision
        assert outcome.contacted_object is None and outcome.center_distance is None

    def test_success_removes_exactly_one(self):
        scene = sc.spawn_scattered(5, 0.05, 9)
        obj = scene.objects[2]
        outcome, after = sc.execute_suction(scene, obj.x, obj.y, obj.height, "sim")
        assert outcome.success and len(after) == len(scene) - 1
        assert all(o.id != obj.id for o in after.objects)

    def test_out_of_bounds(self):
        with pytest.raises(sc.OutOfBoundsError):
            sc.execute_suction(_single_cube_scene(), -0.01, 0.2, 0.05, "sim")

    def test_real_success_implies_sim_success(self):
        rng = np.random.default_rng(5)
        scene = sc.spawn_environment(sc.ENV_HALF_STACKED_NOVEL, 8)
        for _ in range(300):
            x = rng.uniform(0, scene.workspace_side)
            y = rng.uniform(0, scene.workspace_side)
            z = sc.top_height_at(scene, x, y)
            real_out, _ = sc.execute_suction(scene, x, y, z, "real")
            sim_out, _ = sc.execute_suction(scene, x, y, z, "sim")
            if real_out.success:
                assert sim_out.success

    def test_removal_never_raises_height(self):
        scene = sc.spawn_environment(sc.ENV_FULLY_STACKED, 2)
        target = scene.objects[1]
        outcome, after = sc.execute_suction(scene, target.x, target.y, target.top, "sim")
        assert outcome.success
        rng = np.random.default_rng(0)
        for _ in range(200):
            x = rng.uniform(0, scene.workspace_side)
            y = rng.uniform(0, scene.workspace_side)
            assert sc.top_height_at(after, x, y) <= sc.top_height_at(scene, x, y)

    def test_env1_top_center_never_collides(self):
        scene = sc.spawn_environment(sc.ENV_FULLY_STACKED, 17)
        for obj in scene.objects:
            if obj.base_z > 0:
                outcome, _ = sc.execute_suction(scene, obj.x, obj.y, obj.top, "sim")
                assert not outcome.collision


class TestReposition:
    def test_fresh_count(self):
        empty = sc.Scene(())
        scene = sc.reposition(empty, 10, 5)
        assert len(scene) == 10

    def test_determinism(self):
        empty = sc.Scene(())
        assert sc.reposition(empty, 10, 5).objects == sc.reposition(empty, 10, 5).objects

    def test_env_kind(self):
        empty = sc.Scene(())
        scene = sc.reposition(empty, 8, 5, kind=sc.ENV_FULLY_STACKED)
        assert any(o.base_z > 0 for o in scene.objects)


class TestSerialization:
    def test_round_trip_exact(self):
        scene = sc.spawn_environment(sc.ENV_HALF_STACKED_NOVEL, 21)
        text = sc.scene_to_json(scene)
        back = sc.scene_from_json(text)
        assert back.objects == scene.objects
        assert back.workspace_side == scene.workspace_side

    def test_bad_shape_rejected(self):
        text = sc.scene_to_json(_single_cube_scene()).replace('"box"', '"cone"')
        with pytest.raises(ValueError, match="unknown shape"):
            sc.scene_from_json(text)


class TestGeometryHelpers:
    def test_l_block_centroid_inside_footprint(self):
        for k in range(4):
            obj = sc.SceneObject(0, sc.L_BLOCK, (0.03,), 0.04, 0.2, 0.2, yaw=k * math.pi / 2)
            cx, cy = sc.top_face_centroid(obj)
            assert bool(sc.contains(obj, cx, cy))

    def test_l_block_disc_respects_missing_quadrant(self):
        obj = sc.SceneObject(0, sc.L_BLOCK, (0.03,), 0.04, 0.2, 0.2)
        # Centroid region: full disc fits.
        assert sc.disc_on_face(obj, 0.19, 0.19, 0.008)
        # Near the inner corner the missing quadrant cuts the disc.
        assert not sc.disc_on_face(obj, 0.203, 0.203, 0.008)

    @given(
        st.floats(0.05, 0.4),
        st.floats(0.05, 0.4),
        st.floats(0.05, 0.4),
        st.floats(0.05, 0.4),
    )
    @settings(max_examples=60, deadline=None)
    def test_footprint_gap_symmetry(self, ax, ay, bx, by):
        a = sc.SceneObject(0, sc.BOX, (0.02, 0.03), 0.05, ax, ay)
        b = sc.SceneObject(1, sc.CYLINDER, (0.025,), 0.05, bx, by)
        assert sc.footprint_gap(a, b) == pytest.approx(sc.footprint_gap(b, a))

    def test_gap_zero_iff_sampled_overlap(self):
        a = sc.SceneObject(0, sc.BOX, (0.03, 0.02), 0.05, 0.2, 0.2)
        rng = np.random.default_rng(3)
        for _ in range(60):
            b = sc.SceneObject(
                1, sc.CYLINDER, (0.02,), 0.05, rng.uniform(0.12, 0.28), rng.uniform(0.12, 0.28)
            )
            gap = sc.footprint_gap(a, b)
            area = brute_force_overlap_area(a, b)
            if gap > 1e-3:
                assert area == 0.0
            if area > 1e-5:
                assert gap == 0.0
