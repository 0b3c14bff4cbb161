import math
import time

import numpy as np
import pytest

from lbw import geometry as g
from lbw import world as w

INTR = g.default_intrinsics(64, 64)


def pose_at(x, z, yaw=0.0, pitch=0.0):
    return g.CameraPose.from_yaw_pitch((x, w.EYE_HEIGHT, z), yaw, pitch, INTR)


class TestActionState:
    def test_key_validation(self):
        with pytest.raises(ValueError):
            w.ActionState(keys=frozenset({"W", "Q"}))
        with pytest.raises(ValueError):
            w.ActionState(yaw_delta=w.MAX_YAW_STEP * 1.01)
        with pytest.raises(ValueError):
            w.ActionState(pitch_delta=-w.MAX_PITCH_STEP * 1.01)

    def test_bitmask_round_trip(self):
        for mask in range(16):
            a = w.ActionState.from_bitmask(mask)
            assert a.bitmask == mask
        assert w.ActionState(keys=frozenset("W")).bitmask == 0x1
        assert w.ActionState(keys=frozenset({"A"})).bitmask == 0x2
        assert w.ActionState(keys=frozenset({"S"})).bitmask == 0x4
        assert w.ActionState(keys=frozenset({"D"})).bitmask == 0x8

    def test_reserved_bits_rejected(self):
        with pytest.raises(ValueError):
            w.ActionState.from_bitmask(0x10)


class TestDynamics:
    def test_forward_step(self):
        p = pose_at(16.0, 16.0, yaw=0.0)
        n = w.step_dynamics(p, w.ActionState(keys=frozenset("W")), 0.125, w.empty_world())
        assert np.allclose(n.position - p.position, [0.0, 0.0, 0.25], atol=1e-12)

    def test_opposed_keys_cancel(self):
        p = pose_at(16.0, 16.0)
        n = w.step_dynamics(p, w.ActionState(keys=frozenset({"W", "S"})), 0.125, w.empty_world())
        assert np.array_equal(n.position, p.position)
        n = w.step_dynamics(p, w.ActionState(keys=frozenset({"A", "D"})), 0.125, w.empty_world())
        assert np.array_equal(n.position, p.position)

    def test_strafe_directions(self):
        p = pose_at(16.0, 16.0, yaw=0.0)
        d = w.step_dynamics(p, w.ActionState(keys=frozenset({"D"})), 0.125, w.empty_world())
        a = w.step_dynamics(p, w.ActionState(keys=frozenset({"A"})), 0.125, w.empty_world())
        assert d.position[0] > p.position[0] > a.position[0]

    def test_yaw_integrates_before_translation(self):
        p = pose_at(16.0, 16.0, yaw=0.0)
        act = w.ActionState(keys=frozenset("W"), yaw_delta=math.pi / 4)
        n = w.step_dynamics(p, act, 0.125, w.empty_world())
        d = n.position - p.position
        expect = 0.25 * np.array([math.sin(math.pi / 4), 0.0, math.cos(math.pi / 4)])
        assert np.allclose(d, expect, atol=1e-12)

    def test_pitch_clamps(self):
        p = pose_at(16.0, 16.0)
        for _ in range(12):
            p = w.step_dynamics(p, w.ActionState(pitch_delta=w.MAX_PITCH_STEP), 0.125, w.empty_world())
        assert abs(p.pitch - w.PITCH_LIMIT) < 1e-9

    def test_blocked_by_pillar(self):
        world = w.WorldSpec(seed=0, pillars=((16, 18, "red"),))
        p = pose_at(16.5, 17.69, yaw=0.0)  # candidate lands 0.06 from the cell: blocked
        n = w.step_dynamics(p, w.ActionState(keys=frozenset("W")), 0.125, world)
        assert np.array_equal(n.position, p.position)
        # look deltas still integrate when movement is blocked
        n = w.step_dynamics(p, w.ActionState(keys=frozenset("W"), yaw_delta=0.1), 0.125, world)
        assert np.array_equal(n.position, p.position) and abs(n.yaw - 0.1) < 1e-9

    def test_blocked_by_boundary(self):
        p = pose_at(16.0, 31.8, yaw=0.0)
        n = w.step_dynamics(p, w.ActionState(keys=frozenset("W")), 0.125, w.empty_world())
        assert np.array_equal(n.position, p.position)

    def test_rollout_matches_fold(self):
        world = w.build_world(3)
        acts = [w.ActionState(keys=frozenset("W"), yaw_delta=0.05, timestamp=i * 0.125) for i in range(10)]
        p = pose_at(16.0, 10.0)
        seq = w.rollout(p, acts, 0.125, world)
        q = p
        for a, got in zip(acts, seq):
            q = w.step_dynamics(q, a, 0.125, world)
            assert np.array_equal(q.position, got.position)


class TestWorldSpec:
    def test_build_world_deterministic(self):
        a, b = w.build_world(42), w.build_world(42)
        assert a == b
        assert w.build_world(43) != a

    def test_pillar_count_range(self):
        for seed in range(12):
            n = len(w.build_world(seed).pillars)
            assert 8 <= n <= 14

    def test_apply_event_immutable(self):
        world = w.build_world(0)
        night = w.apply_event(world, w.EventSpec("set_time_of_day", "night"))
        assert world.time_of_day == "day" and night.time_of_day == "night"
        assert night.pillars == world.pillars

    def test_event_validation(self):
        world = w.build_world(0)
        with pytest.raises(ValueError):
            w.EventSpec("melt_floor", None)
        with pytest.raises(ValueError):
            w.apply_event(world, w.EventSpec("set_time_of_day", "dusk"))
        with pytest.raises(ValueError):
            w.apply_event(world, w.EventSpec("set_tint", (1.0, 1.0)))
        i, j, _ = world.pillars[0]
        with pytest.raises(ValueError):
            w.apply_event(world, w.EventSpec("spawn_object", ((i, j), "red")))
        with pytest.raises(ValueError):
            w.apply_event(world, w.EventSpec("spawn_object", ((50, 2), "red")))
        with pytest.raises(ValueError):
            w.apply_event(world, w.EventSpec("spawn_object", ((5, 5), "vantablack")))


class TestRender:
    def test_shape_dtype_determinism(self):
        world = w.build_world(0)
        p = pose_at(16.0, 16.0)
        img = w.render(world, p, 64, 64)
        assert img.shape == (64, 64, 3) and img.dtype == np.uint8
        assert np.array_equal(img, w.render(world, p, 64, 64))

    def test_scene_composition(self):
        world = w.build_world(0)
        cmap = w.hit_test(world, pose_at(16.0, 16.0), 64, 64)
        assert cmap[0].min() == w.HIT_SKY  # top row sees sky
        assert np.all(cmap[-1] == w.HIT_FLOOR)  # bottom row sees floor
        assert (cmap == w.HIT_WALL).any() or (cmap == w.HIT_PILLAR).any()

    def test_night_darker_everywhere(self):
        world = w.build_world(1)
        night = w.apply_event(world, w.EventSpec("set_time_of_day", "night"))
        p = pose_at(12.0, 12.0, yaw=0.7)
        assert w.luminance(w.render(night, p)) < w.luminance(w.render(world, p)) * 0.6

    def test_tint_shifts_channel_balance(self):
        world = w.build_world(1)
        red = w.apply_event(world, w.EventSpec("set_tint", (1.5, 0.7, 0.7)))
        p = pose_at(12.0, 12.0, yaw=0.7)
        base = w.render(world, p).astype(np.float64)
        tinted = w.render(red, p).astype(np.float64)
        assert tinted[..., 0].mean() > base[..., 0].mean()
        assert tinted[..., 1].mean() < base[..., 1].mean()

    def test_hit_test_invariant_to_lighting(self):
        world = w.build_world(2)
        p = pose_at(20.0, 20.0, yaw=2.0)
        night = w.apply_event(world, w.EventSpec("set_time_of_day", "night"))
        tinted = w.apply_event(world, w.EventSpec("set_tint", (0.5, 1.2, 0.9)))
        assert np.array_equal(w.hit_test(world, p), w.hit_test(night, p))
        assert np.array_equal(w.hit_test(world, p), w.hit_test(tinted, p))

    def test_center_pixel_labels_facing_pillar(self):
        world = w.build_world(0)
        i, j, cname = world.pillars[0]
        cx, cz = i + 0.5, j + 0.5
        px, pz = cx - 3.0, cz
        yaw = math.atan2(cx - px, cz - pz)
        p = pose_at(px, pz, yaw=yaw)
        assert w.hit_label(world, p, 32, 32) == f"pillar-{cname}"

    def test_spawned_object_appears(self):
        world = w.build_world(0)
        occupied = {(c[0], c[1]) for c in world.pillars}
        cell = next(
            (a, b)
            for a in range(4, 28)
            for b in range(4, 28)
            if (a, b) not in occupied and (a - 16) ** 2 + (b - 16) ** 2 > 16
        )
        spawned = w.apply_event(world, w.EventSpec("spawn_object", (cell, "magenta")))
        yaw = math.atan2(cell[0] + 0.5 - 16.0, cell[1] + 0.5 - 16.0)
        p = pose_at(16.0, 16.0, yaw=yaw)
        assert (w.hit_test(spawned, p) == w.HIT_OBJECT).sum() > 0
        assert (w.hit_test(world, p) == w.HIT_OBJECT).sum() == 0

    def test_pitch_moves_horizon(self):
        world = w.build_world(0)
        up = w.hit_test(world, pose_at(16.0, 16.0, pitch=0.4))
        down = w.hit_test(world, pose_at(16.0, 16.0, pitch=-0.4))
        assert (up == w.HIT_SKY).sum() > (down == w.HIT_SKY).sum()

    def test_out_of_bounds_raises(self):
        with pytest.raises(w.OutOfBoundsError):
            w.render(w.build_world(0), pose_at(40.0, 16.0))

    def test_render_speed(self):
        world = w.build_world(0)
        p = pose_at(16.0, 16.0)
        w.render(world, p)  # warm the grid cache
        t0 = time.perf_counter()
        for _ in range(100):
            w.render(world, p, 64, 64)
        per_frame = (time.perf_counter() - t0) / 100
        assert per_frame < 0.005  # 1 ms nominal, slack for loaded CI


def test_luminance_bounds():
    assert w.luminance(np.zeros((4, 4, 3), dtype=np.uint8)) == 0.0
    assert w.luminance(np.full((4, 4, 3), 255, dtype=np.uint8)) == 1.0
