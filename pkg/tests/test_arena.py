import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hola.arena import (
    Action,
    ArenaConfig,
    ConfigError,
    ContractError,
    EpisodeTrace,
    Rect,
    SpawnError,
    load_arena_config,
    new_world,
    observe,
    rect_distance,
    replay,
    step,
)
from hola.config import default_config_path

from conftest import place

FAR = [(0.5, 0.5), (1.8, 0.5), (3.1, 0.5), (0.5, 4.5), (3.1, 4.5)]


def test_default_config_matches_table(config):
    assert (config.w_b, config.h_b, config.w_s, config.h_s) == (3.6, 5.0, 3.2, 0.6)
    assert (config.w_o, config.h_o, config.d_c, config.d_p, config.d_s) == (0.65, 0.1, 0.2, 2.0, 0.1)
    assert (config.v_P, config.v_E, config.t_max, config.fps) == (0.3, 0.6, 100.0, 10)
    assert config.max_ticks == 1000
    assert len(config.obstacles) == 5


def test_packaged_yaml_equals_builtin_defaults(config):
    assert load_arena_config(default_config_path()) == config


@pytest.mark.parametrize(
    "overrides",
    [{"d_c": 0.0}, {"d_s": 0.3}, {"v_P": 0.7}, {"t_max": 10.05}, {"obstacles": [(3.5, 0, 3.8, 1)]},
     {"obstacles": [(1.0, 0.1, 1.5, 0.3)]}],
)
def test_invalid_configs_rejected(overrides):
    with pytest.raises(ConfigError):
        ArenaConfig(**overrides)


def test_config_file_parse_error_reports_line(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("arena:\n  w_b: 3.6\n  h_b: [5\n")
    with pytest.raises(ConfigError, match="line"):
        load_arena_config(bad)


def test_new_world_deterministic(config):
    a, b = new_world(config, 7), new_world(config, 7)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.headings, b.headings)
    assert a.rng_state == b.rng_state


@pytest.mark.parametrize("seed", range(20))
def test_spawn_regions_and_separation(config, seed):
    w = new_world(config, seed)
    for i in w.pursuer_ids:
        x, y = w.positions[i]
        assert 0.0 <= y <= 0.6 and 0.2 <= x <= 3.4
    for i in w.evader_ids:
        x, y = w.positions[i]
        assert 4.4 <= y <= 5.0 and 0.2 <= x <= 3.4
    d = np.hypot(*(w.positions[:, None] - w.positions[None]).transpose(2, 0, 1))
    assert (d[~np.eye(5, dtype=bool)] >= config.d_c).all()
    assert ((0 <= w.headings) & (w.headings < 2 * math.pi)).all()
    assert w.tick == 0 and w.active.all()


def test_infeasible_spawn():
    tiny = ArenaConfig(num_pursuers=40, pursuer_spawn=(1.0, 0.0, 1.3, 0.3))
    with pytest.raises(SpawnError):
        new_world(tiny, 0)


def test_step_kinematics(open_config):
    positions = [(1.0, 1.0), (2.0, 1.0), (3.0, 1.0), (1.0, 4.0), (3.0, 4.0)]
    w = place(open_config, positions)
    w2, _ = step(w, [0.0, 0.25, 0.5, 0.75, 0.0])
    assert w2.positions[0] == pytest.approx((1.03, 1.00), abs=1e-12)
    assert w2.positions[1] == pytest.approx((2.00, 1.03), abs=1e-12)
    assert w2.positions[2] == pytest.approx((2.97, 1.00), abs=1e-12)
    assert w2.positions[3] == pytest.approx((1.00, 3.94), abs=1e-12)
    assert w2.positions[4] == pytest.approx((3.06, 4.00), abs=1e-12)
    # the input world is left untouched
    assert tuple(w.positions[0]) == (1.0, 1.0)


def test_action_clamped():
    assert Action(1.7) == 1.0 and Action(-0.2) == 0.0


def test_capture_after_move(open_config):
    base = [(1.0, 1.0), (2.5, 1.0), (3.3, 1.0), (1.0, 1.15), (3.0, 4.0)]
    # both head north: pursuer at y=1.03, evader at y=1.21, 0.18 apart
    _, events = step(place(open_config, base), [0.25] * 5)
    assert events.captures == [(0, 3)]
    # pursuer south, evader north: 0.97 vs 1.21
    _, events = step(place(open_config, base), [0.75, 0.25, 0.25, 0.25, 0.25])
    assert events.captures == []


def test_capture_threshold_static(open_config):
    # pursuer moves east 0.03, evader 0.06, so the y-offset is unchanged
    for dy, expected in ((0.15, True), (0.25, False)):
        w = place(open_config, [(1.0, 1.0), (2.5, 1.0), (3.3, 1.0), (1.0, 1.0 + dy), (3.0, 4.0)])
        _, events = step(w, [0.0] * 5)
        sep = math.hypot(0.03, dy)
        assert (sep < 0.2) == expected
        assert bool(events.captures) == expected


def test_capture_deactivates_both(open_config):
    w = place(open_config, [(1.0, 1.0), (2.5, 1.0), (3.3, 1.0), (1.0, 1.15), (3.0, 4.0)])
    w2, events = step(w, [0.0] * 5)
    assert events.captures == [(0, 3)]
    assert not w2.active[0] and not w2.active[3]
    w3, _ = step(w2, [0.0] * 5)
    assert tuple(w3.positions[0]) == tuple(w2.positions[0])
    assert tuple(w3.positions[3]) == tuple(w2.positions[3])


def test_captor_stays_active_when_flag_off():
    cfg = ArenaConfig(obstacles=(), deactivate_captor=False)
    w = place(cfg, [(1.0, 1.0), (2.5, 1.0), (3.3, 1.0), (1.0, 1.15), (3.0, 4.0)])
    w2, events = step(w, [0.0] * 5)
    assert events.captures == [(0, 3)] and w2.active[0] and not w2.active[3]


def test_multi_capture_takes_nearer_evader(open_config):
    # pursuer 0 within d_c of both evaders; the nearer one (id 4) is captured
    w = place(open_config, [(1.0, 1.0), (2.5, 1.0), (3.3, 1.0), (1.0, 1.16), (1.0, 0.88)])
    _, events = step(w, [0.0] * 5)
    assert events.captures == [(0, 4)]


def test_pursuer_collision_threshold(open_config):
    w = place(open_config, [(1.0, 1.0), (1.18, 1.0), (3.0, 1.0), (1.0, 4.0), (3.0, 4.0)])
    _, events = step(w, [0.0] * 5)
    assert events.pursuer_collisions == [(0, 1)]
    w = place(open_config, [(1.0, 1.0), (1.25, 1.0), (3.0, 1.0), (1.0, 4.0), (3.0, 4.0)])
    _, events = step(w, [0.0] * 5)
    assert events.pursuer_collisions == []


def test_obstacle_and_wall_collision_threshold():
    cfg = ArenaConfig(obstacles=(Rect(1.5, 2.0, 2.15, 2.1),))
    # after moving east 0.03: pursuer 0 is 0.09 below the obstacle, pursuer 1 is 0.11 below
    positions = [(1.6, 1.91), (1.9, 1.89), (3.0, 1.0), (1.0, 4.0), (3.0, 4.0)]
    _, events = step(place(cfg, positions), [0.0] * 5)
    assert events.obstacle_collisions == [0]
    # walls: 0.08 from the west wall vs 0.12
    positions = [(0.11, 1.0), (0.15, 2.5), (3.0, 1.0), (1.0, 4.0), (3.0, 4.0)]
    _, events = step(place(cfg, positions), [0.5, 0.5, 0.0, 0.0, 0.0])
    assert events.obstacle_collisions == [0]


def test_boundary_clamp(open_config):
    w = place(open_config, [(0.01, 1.0), (2.0, 1.0), (3.0, 1.0), (1.0, 4.99), (3.0, 4.0)])
    w2, events = step(w, [0.5, 0.0, 0.0, 0.25, 0.0])
    assert w2.positions[0, 0] == 0.0
    assert w2.positions[3, 1] == 5.0
    assert 0 in events.obstacle_collisions and 3 in events.obstacle_collisions


def test_timeout_at_tick_1000(open_config):
    w = place(open_config, FAR, tick=999)
    w2, events = step(w, [0.0] * 5)
    assert w2.tick == 1000 and events.terminal and events.terminal_reason == "timeout"
    with pytest.raises(ContractError):
        step(w2, [0.0] * 5)


def test_all_captured_terminal(open_config):
    w = place(open_config, [(1.0, 1.0), (2.0, 1.0), (3.0, 1.0), (1.0, 1.1), (3.0, 4.0)],
              active=[True, True, True, True, False])
    w2, events = step(w, [0.0] * 5)
    assert events.terminal and events.terminal_reason == "all_captured"


def test_action_count_mismatch(config):
    with pytest.raises(ContractError):
        step(new_world(config, 0), [0.0] * 4)


def test_observe_masks_beyond_range(open_config):
    w = place(open_config, [(1.0, 1.0), (2.0, 1.0), (3.0, 1.0), (1.0, 3.5), (1.0, 2.5)])
    obs = observe(w, 0)
    far, near = obs.evader_slots
    assert not far.visible and far.distance == 2.0 and far.bearing == 0.0
    assert near.visible and near.distance == pytest.approx(1.5)


def test_observe_teammate_east_and_west_wall(open_config):
    w = place(open_config, [(0.05, 1.0), (1.05, 1.0), (3.0, 3.5), (1.0, 4.5), (3.0, 4.5)])
    obs = observe(w, 0)
    mate = obs.teammate_slots[0]
    assert mate.visible and mate.distance == pytest.approx(1.0) and mate.bearing == pytest.approx(0.0)
    assert obs.nearest_wall[0] == pytest.approx(0.05)
    assert obs.nearest_wall[1] == pytest.approx(math.pi)
    assert not obs.teammate_slots[1].visible


def test_observe_slot_count_fixed_and_invalid_id(config):
    w = new_world(config, 3)
    w.active[:] = False
    obs = observe(w, 1)
    assert len(obs.teammate_slots) == 2 and len(obs.evader_slots) == 2
    assert not any(s.active for s in obs.evader_slots)
    with pytest.raises(ContractError):
        observe(w, 9)


@pytest.mark.parametrize(
    "point, rect, expected",
    [((0, 0), Rect(1, 0, 2, 1), 1.0), ((1.5, 0.5), Rect(1, 0, 2, 1), 0.0), ((2, 3), Rect(0, 0, 1, 1), math.sqrt(5))],
)
def test_rect_distance(point, rect, expected):
    assert rect_distance(point, rect) == pytest.approx(expected)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.01, 2), st.floats(0.01, 2))
def test_rect_distance_matches_sampled_boundary(px, py, x0, y0, w, h):
    rect = Rect(x0, y0, x0 + w, y0 + h)
    t = np.linspace(0, 1, 2001)
    border = np.concatenate(
        [np.stack([x0 + w * t, np.full_like(t, y0)], 1), np.stack([x0 + w * t, np.full_like(t, y0 + h)], 1),
         np.stack([np.full_like(t, x0), y0 + h * t], 1), np.stack([np.full_like(t, x0 + w), y0 + h * t], 1)]
    )
    brute = np.hypot(border[:, 0] - px, border[:, 1] - py).min()
    inside = rect.contains(px, py)
    d = rect_distance((px, py), rect)
    if inside:
        assert d == 0.0
    else:
        assert d == pytest.approx(brute, abs=2e-3 * max(w, h))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.floats(0, 1), min_size=5 * 40, max_size=5 * 40))
def test_invariants_under_random_actions(seed, flat):
    cfg = ArenaConfig()
    w = new_world(cfg, seed)
    for k in range(40):
        if w.terminal:
            break
        acts = flat[5 * k : 5 * k + 5]
        w2, events = step(w, acts)
        disp = np.hypot(*(w2.positions - w.positions).T)
        speeds = np.array([cfg.v_P] * 3 + [cfg.v_E] * 2) * cfg.dt
        assert (disp <= speeds + 1e-12).all()
        assert (w2.active <= w.active).all()  # never reactivated
        assert ((w2.positions >= 0) & (w2.positions <= [cfg.w_b, cfg.h_b])).all()
        assert np.isfinite(w2.positions).all()
        for p, e in events.captures:
            assert math.dist(w2.positions[p], w2.positions[e]) < cfg.d_c
        frozen = ~w.active
        assert np.array_equal(w2.positions[frozen], w.positions[frozen])
        w = w2


def test_unclamped_displacement_exact(open_config):
    w = place(open_config, [(1.5, 2.5), (2.0, 1.5), (3.0, 1.0), (1.0, 4.0), (2.0, 4.0)])
    rng = np.random.default_rng(0)
    for _ in range(50):
        w2, _ = step(w, rng.random(5).tolist())
        disp = np.hypot(*(w2.positions - w.positions).T)
        assert disp[:3] == pytest.approx([0.03] * 3, abs=1e-12)
        assert disp[3:] == pytest.approx([0.06] * 2, abs=1e-12)
        w = place(open_config, [(1.5, 2.5), (2.0, 1.5), (3.0, 1.0), (1.0, 4.0), (2.0, 4.0)])


def test_trace_roundtrip_and_tamper(tmp_path, config):
    from hola.episode import run_episode, team_controllers
    from hola.policies import PolicyHandle

    team = [PolicyHandle("greedy", "g")] * 3
    res = run_episode(config, 5, team_controllers(team, config, 5), record=True)
    path = tmp_path / "trace.jsonl"
    res.trace.dump(path)
    loaded = EpisodeTrace.load(path)
    assert replay(loaded) is None
    loaded.records[17].poses[1]["x"] += 1e-9
    assert replay(loaded) == 17
