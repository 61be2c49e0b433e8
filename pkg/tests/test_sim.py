import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doanav import sim
from doanav.sim import AgentState, NavEnv, ObjectInstance, World, WorldConfig


def hand_world(rows, objects, **cfg_kw):
    """World from an ASCII map ('#' obstacle) and (class, x, y[, band, size]) tuples."""
    kw = dict(num_classes=4, obstacle_density=0.0, conf_noise_sigma=0.0)
    kw.update(cfg_kw)
    cfg = WorldConfig(grid_w=len(rows[0]), grid_h=len(rows), **kw)
    walls = np.array([[c == "#" for c in r] for r in rows])
    blocked = walls.copy()
    objs = []
    for spec in objects:
        c, x, y = spec[:3]
        band = spec[3] if len(spec) > 3 else "mid"
        size = spec[4] if len(spec) > 4 else 1.0
        objs.append(ObjectInstance(c, x, y, band, size))
        blocked[y, x] = True
    return World(cfg, 0, blocked, walls, objs)


def start(env, state, target):
    env.reset(target, 0)
    env.state = state


def test_generation_is_deterministic_and_round_trips(tmp_path):
    cfg = WorldConfig(num_classes=8)
    a, b = sim.generate_world(11, cfg), sim.generate_world(11, cfg)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    a.save(tmp_path / "w.json")
    c = World.load(tmp_path / "w.json")
    assert c.to_dict() == a.to_dict()
    assert json.dumps(sim.generate_world(12, cfg).to_dict()) != json.dumps(a.to_dict())


def test_generated_worlds_are_connected_with_four_classes():
    cfg = WorldConfig(num_classes=8)
    for seed in range(30):
        w = sim.generate_world(seed, cfg)
        assert len(w.classes_present()) >= 4
        walk = w.walkable
        ys, xs = np.nonzero(walk)
        seen = {(xs[0], ys[0])}
        stack = [(xs[0], ys[0])]
        while stack:
            x, y = stack.pop()
            for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                if 0 <= nx < walk.shape[1] and 0 <= ny < walk.shape[0] and walk[ny, nx] and (nx, ny) not in seen:
                    seen.add((nx, ny))
                    stack.append((nx, ny))
        assert len(seen) == walk.sum()
        cells = [(o.x, o.y, o.class_id) for o in w.objects]
        assert len(cells) == len(set(cells))


def test_block_affinity_colocates_groups():
    n = 8
    aff = np.zeros((n, n))
    aff[:4, :4] = 1
    aff[4:, 4:] = 1
    np.fill_diagonal(aff, 0)
    cfg = WorldConfig(num_classes=n, class_affinity=aff.tolist())
    hits = total = 0
    for seed in range(100):
        group_a = [o for o in sim.generate_world(seed, cfg).objects if o.class_id < 4]
        for o in group_a:
            total += 1
            hits += any(p is not o and max(abs(p.x - o.x), abs(p.y - o.y)) <= 2 for p in group_a)
    assert total > 100
    assert hits / total > 0.8


def test_cluster_larger_than_class_count():
    cfg = WorldConfig(num_classes=4, cluster_size=(6, 6), n_clusters=2)
    w = sim.generate_world(0, cfg)
    assert len(w.classes_present()) == 4


def test_pigeonhole_infeasible():
    cfg = WorldConfig(grid_w=3, grid_h=3, num_classes=20, place_all_classes=True, distinct_cells=True)
    with pytest.raises(sim.WorldGenerationError):
        sim.generate_world(0, cfg)


def test_config_validation():
    with pytest.raises(sim.WorldGenerationError):
        sim.generate_world(0, WorldConfig(num_classes=3))
    bad = np.eye(4)
    bad[0, 1] = 1.0
    with pytest.raises(sim.WorldGenerationError):
        sim.generate_world(0, WorldConfig(num_classes=4, class_affinity=bad.tolist()))


def test_reset_rejects_absent_target():
    w = hand_world(["....."], [(0, 4, 0)])
    with pytest.raises(sim.EpisodeSpecError):
        NavEnv(w).reset(2, 0)


def test_done_adjacent_visible_target_succeeds():
    w = hand_world(["....."], [(0, 3, 0)])
    env = NavEnv(w)
    start(env, AgentState(2, 0, 0, 0), 0)
    out = env.step(sim.DONE)
    assert out.success and out.done and out.reward == 5.0


def test_done_with_target_behind_fails():
    w = hand_world(["....."], [(0, 1, 0)])
    env = NavEnv(w)
    start(env, AgentState(2, 0, 0, 0), 0)  # facing +x, target at distance 1 behind
    out = env.step(sim.DONE)
    assert out.done and not out.success
    assert out.info["dist_to_target"] == 1.0
    assert out.reward == pytest.approx(-0.01)


def test_move_into_wall_collides():
    w = hand_world(["..#.."], [(0, 4, 0)])
    env = NavEnv(w)
    start(env, AgentState(1, 0, 0, 0), 0)
    out = env.step(sim.MOVE_AHEAD)
    assert out.next_state == AgentState(1, 0, 0, 0)
    assert out.info["collided"]
    out = env.step(sim.ROTATE_RIGHT)
    assert out.next_state.yaw == 90 and not out.info["collided"]
    out = env.step(sim.LOOK_UP)
    out = env.step(sim.LOOK_UP)
    assert out.next_state.pitch == 1


def test_step_rejects_bad_action():
    w = hand_world(["....."], [(0, 4, 0)])
    env = NavEnv(w)
    env.reset(0, 0)
    with pytest.raises(ValueError):
        env.step(6)


def test_episode_truncates_at_max_steps():
    w = hand_world(["....."], [(0, 4, 0)], max_steps=3)
    env = NavEnv(w)
    env.reset(0, 0)
    outs = [env.step(sim.ROTATE_LEFT) for _ in range(3)]
    assert [o.done for o in outs] == [False, False, True]
    assert not outs[-1].success


def test_observe_nothing_visible():
    w = hand_world(["....."], [(1, 4, 0)])
    obs = sim.observe(w, AgentState(0, 0, 180, 0), np.random.default_rng(0), target=1)
    assert np.all(obs.conf == 0)
    det = obs.detections
    assert np.all(det[:, :-1] == 0)
    assert det[1, -1] == 1.0 and det[[0, 2, 3], -1].sum() == 0


def test_observe_ground_truth_conf_is_one():
    w = hand_world(["......"], [(2, 4, 0, "mid", 0.3)], ground_truth_detections=True, conf_noise_sigma=0.3)
    obs = sim.observe(w, AgentState(0, 0, 0, 0), np.random.default_rng(0), target=2)
    assert obs.conf[2] == 1.0
    d = obs.detection(2)
    assert d.conf == 1.0 and np.all((d.bbox >= 0) & (d.bbox <= 1))


def test_conf_at_view_range_is_noise_only():
    sigma = 0.05
    w = hand_world(["......"], [(0, 5, 0)], conf_noise_sigma=sigma)
    rng = np.random.default_rng(0)
    vals = [sim.observe(w, AgentState(0, 0, 0, 0), rng, 0).conf[0] for _ in range(200)]
    assert max(vals) <= 5 * sigma
    assert np.mean(vals) < 2 * sigma


def test_conf_monotone_in_distance_without_noise():
    w = hand_world(["......."], [(0, 6, 0, "mid", 0.8)])
    confs = [sim.observe(w, AgentState(x, 0, 0, 0), np.random.default_rng(0), 0).conf[0] for x in range(1, 6)]
    assert all(a <= b for a, b in zip(confs, confs[1:]))


def test_height_band_rules():
    w = hand_world([".........."], [(0, 5, 0, "low"), (1, 4, 0, "high"), (2, 1, 0, "low")])
    s = AgentState(0, 0, 0, 0)
    low_far, high_far, low_near = w.objects
    assert not sim.is_visible(w, s, low_far)
    assert sim.is_visible(w, s._replace(pitch=-1), low_far)
    assert not sim.is_visible(w, s, high_far)
    assert sim.is_visible(w, s._replace(pitch=1), high_far)
    assert sim.is_visible(w, s, low_near)


def test_engineered_confidence_skew():
    cfg = WorldConfig(num_classes=8)
    rng = np.random.default_rng(0)
    confs = []
    for i in range(1000):
        w = sim.generate_world(int(rng.integers(1_000_000)), cfg)
        _, obs = NavEnv(w).reset(w.classes_present()[0], i, avoid_goal_start=False)
        confs.append(obs.conf)
    mean = np.mean(confs, axis=0)
    assert mean[0] >= 3 * mean[-1]


def test_shortest_path_degenerate_and_corridor():
    w = hand_world(["....."], [(0, 4, 0)], success_dist=1.0)
    assert sim.shortest_path_length(w, AgentState(3, 0, 0, 0), 0) == 0
    # hand count: three MoveAhead actions from x=0 to x=3
    assert sim.shortest_path_length(w, AgentState(0, 0, 0, 0), 0) == 3
    # facing away costs two rotations on top
    assert sim.shortest_path_length(w, AgentState(0, 0, 180, 0), 0) == 5


def test_shortest_path_unreachable():
    w = hand_world(["..#.."], [(0, 4, 0)], success_dist=1.0)
    assert sim.shortest_path_length(w, AgentState(0, 0, 0, 0), 0) == math.inf


def _brute_force_len(world, pose, target, max_len):
    for n in range(max_len + 1):
        for seq in itertools.product(range(5), repeat=n):
            s = pose
            for a in seq:
                s, _ = sim._transition(world, s, a)
            if sim.success_predicate(world, s, target):
                return n
    return math.inf


@pytest.mark.parametrize("seed", range(6))
def test_shortest_path_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    rows = ["".join("#" if rng.random() < 0.15 else "." for _ in range(5)) for _ in range(4)]
    objs = [(0, int(rng.integers(5)), int(rng.integers(4)), "mid")]
    w = hand_world(rows, objs, success_dist=1.5)
    ys, xs = np.nonzero(w.walkable)
    for i in rng.choice(len(xs), size=min(4, len(xs)), replace=False):
        pose = AgentState(int(xs[i]), int(ys[i]), int(rng.integers(4)) * 90, 0)
        bfs = sim.shortest_path_length(w, pose, 0)
        brute = _brute_force_len(w, pose, 0, 6)
        if brute <= 6:
            assert bfs == brute
        else:
            assert bfs > 6


def _rollout(seed, actions):
    cfg = WorldConfig(num_classes=8)
    w = sim.generate_world(seed, cfg)
    env = NavEnv(w)
    target = w.classes_present()[-1]
    _, obs = env.reset(target, seed)
    trace = [obs.detections.tobytes(), obs.image.tobytes()]
    for a in actions:
        if env.done:
            break
        out = env.step(a)
        trace.append((out.next_state, out.reward, out.done, out.success, out.observation.detections.tobytes(),
                      out.observation.image.tobytes()))
        if out.success:
            assert out.info["dist_to_target"] <= cfg.success_dist
    return trace


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 5), min_size=1, max_size=30))
def test_determinism_and_success_distance(seed, actions):
    assert _rollout(seed, actions) == _rollout(seed, actions)
