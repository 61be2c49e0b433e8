import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doanav import autodiff as ad
from doanav import model as M
from doanav import trainer as T
from doanav.metrics import EmptyInputError
from doanav.sim import DONE, NavEnv, WorldConfig, generate_world


def tiny_world_cfg(**kw):
    base = dict(num_classes=4, d_img=4, d_vis=4, m_cells=4, grid_w=6, grid_h=6, n_clusters=3, max_steps=30)
    base.update(kw)
    return WorldConfig(**base)


def tiny_model_cfg(wcfg, **kw):
    base = dict(n_classes=wcfg.num_classes, m_cells=wcfg.m_cells, d_img=wcfg.d_img, d_vis=wcfg.d_vis,
                embed_dim=4, head_dim=4, n_heads=2, reduce_dim=6, lstm_hidden=5, lstm_input=4)
    base.update(kw)
    return M.ModelConfig(**base)


def tiny_train_cfg(**kw):
    base = dict(workers=2, total_episodes=6, rollout_len=5, train_world_seeds=[0, 1], val_world_seeds=[50],
                val_episodes=3, val_every=3)
    base.update(kw)
    return T.TrainConfig(**base)


@pytest.fixture
def setup():
    wcfg = tiny_world_cfg()
    mcfg = tiny_model_cfg(wcfg)
    params = M.ModelParams.init(mcfg, np.random.default_rng(0))
    world = generate_world(3, wcfg)
    return wcfg, mcfg, params, world


def fresh_episode(world, params, target=None, seed=0):
    env = NavEnv(world)
    target = world.classes_present()[0] if target is None else target
    _, obs = env.reset(target, seed)
    return env, T.Carry(obs, M.initial_hidden(params.cfg), M.START_ACTION)


# -- returns and loss --------------------------------------------------------------
def test_returns_hand_values():
    # gamma 0.9: R2 = 2, R1 = 0.9 * 2, R0 = 1 + 0.9 * 1.8
    np.testing.assert_allclose(T.discounted_returns([1.0, 0.0, 2.0], 0.9, 0.0), [2.62, 1.8, 2.0], rtol=1e-15)
    np.testing.assert_allclose(T.discounted_returns([0.0, 0.0], 0.5, 4.0), [1.0, 2.0], rtol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=25), st.floats(0.01, 1.0), st.floats(-10, 10))
def test_returns_match_brute_force(rewards, gamma, boot):
    got = T.discounted_returns(rewards, gamma, boot)
    n = len(rewards)
    for t in range(n):
        ref = sum(gamma ** k * rewards[t + k] for k in range(n - t)) + gamma ** (n - t) * boot
        assert abs(got[t] - ref) <= 1e-10 * max(1.0, abs(ref))


def _manual_rollout(rewards, values, logits_rows, actions, bootstrap=0.0):
    trans = []
    for r, v, z, a in zip(rewards, values, logits_rows, actions):
        lp = ad.log_softmax_rows(ad.parameter(np.array([z], dtype=float)))
        ent = ad.scale(ad.sum_all(ad.mul(ad.exp(lp), lp)), -1.0)
        trans.append(T.Transition(None, a, r, ad.parameter([[v]]), ad.index(lp, (0, a)), ent, False, None))
    return T.Rollout(trans, bootstrap)


def test_loss_zero_rewards_is_entropy_only():
    rng = np.random.default_rng(0)
    ro = _manual_rollout([0.0] * 3, [0.0] * 3, rng.normal(size=(3, 6)), [0, 3, 5])
    ent = sum(float(t.entropy.data) for t in ro.transitions)
    assert T.a3c_loss(ro, 0.99, 0.5, 0.01).item() == pytest.approx(-0.01 * ent, rel=1e-14)


def test_loss_single_terminal_transition():
    z = np.array([0.2, -0.1, 0.0, 0.3, 0.1, 0.5])
    ro = _manual_rollout([5.0], [0.0], [z], [DONE])
    logp = z[DONE] - math.log(np.exp(z).sum())
    p = np.exp(z) / np.exp(z).sum()
    ent = -(p * np.log(p)).sum()
    # return 5, advantage 5
    expected = -logp * 5.0 + 0.5 * 25.0 - 0.01 * ent
    assert T.a3c_loss(ro, 0.99).item() == pytest.approx(expected, rel=1e-13)
    with pytest.raises(ValueError):
        T.a3c_loss(T.Rollout([], 0.0), 0.99)


def test_loss_gradient_matches_finite_differences(setup):
    wcfg, mcfg, params, world = setup
    for t in params:
        t.data[...] = np.random.default_rng(5).normal(scale=0.5, size=t.shape)
    env, carry = fresh_episode(world, params)
    ro, _ = T.collect_rollout(env, params, carry, np.random.default_rng(1), 4, train=False)
    actions = [t.action for t in ro.transitions]
    fixed_adv = T.discounted_returns([t.reward for t in ro.transitions], 0.9, ro.bootstrap_value) \
        - np.array([t.value.data[0, 0] for t in ro.transitions])

    def loss():
        env2, carry2 = fresh_episode(world, params)
        r, _ = T.collect_rollout(env2, params, carry2, None, len(actions), train=False, replay_actions=actions)
        r.bootstrap_value = ro.bootstrap_value
        return T.a3c_loss(r, 0.9, 0.5, 0.01, advantages=fixed_adv)

    assert ad.grad_check(loss, list(params), max_coords=25) < 1e-3


# -- rollouts ------------------------------------------------------------------------
def test_rollout_deterministic(setup):
    _, _, params, world = setup

    def run():
        env, carry = fresh_episode(world, params, seed=4)
        ro, nxt = T.collect_rollout(env, params, carry, np.random.default_rng(9), 12, np.random.default_rng(2))
        return [(t.action, t.reward, t.done, t.value.data.tobytes()) for t in ro.transitions], ro.bootstrap_value

    assert run() == run()


def test_rollout_terminal_sets_bootstrap_zero(setup):
    _, _, params, world = setup
    env, carry = fresh_episode(world, params)
    ro, nxt = T.collect_rollout(env, params, carry, None, 10, replay_actions=[DONE], train=False)
    assert len(ro) == 1 and ro.transitions[0].done and ro.bootstrap_value == 0.0 and ro.episode_done
    assert nxt is None


def test_rollout_bootstrap_and_hidden_carry(setup):
    _, _, params, world = setup
    env, carry = fresh_episode(world, params)
    ro, nxt = T.collect_rollout(env, params, carry, None, 3, replay_actions=[1, 2, 1], train=False)
    assert not ro.episode_done and ro.bootstrap_value != 0.0
    assert nxt.prev_action == 1
    assert not np.all(nxt.hidden[0].data == 0)
    assert nxt.hidden[0]._parents == ()  # detached between rollouts


def test_uniform_policy_action_frequencies():
    wcfg = tiny_world_cfg(max_steps=1000)
    mcfg = tiny_model_cfg(wcfg, done_reminder=False)
    params = M.ModelParams.init(mcfg, np.random.default_rng(0))
    params["actor.w"].data[...] = 0.0
    params["actor.b"].data[...] = 0.0
    worker = T.Worker(0, [generate_world(s, wcfg) for s in range(3)], 0)
    counts = np.zeros(6)
    n = 0
    while n < 10_000:
        ro = worker.rollout(params, min(200, 10_000 - n))
        for t in ro.transitions:
            counts[t.action] += 1
        n += len(ro)
    p = 1 / 6
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


# -- Adam ----------------------------------------------------------------------------
def _one_param(value):
    return {"w": ad.parameter(np.array(value, dtype=float))}


def test_adam_zero_grad_keeps_params():
    p = _one_param([1.0, -2.0])
    st_ = T.AdamState({"w": np.array([0.5, 0.1])}, {"w": np.array([0.2, 0.3])}, t=3)
    T.adam_update(p, {"w": np.zeros(2)}, st_, 1e-3)
    np.testing.assert_allclose(st_.m["w"], [0.45, 0.09], rtol=1e-15)
    np.testing.assert_allclose(st_.v["w"], [0.2 * 0.999, 0.3 * 0.999], rtol=1e-15)
    q = _one_param([1.0, -2.0])
    T.adam_update(q, {"w": np.zeros(2)}, T.AdamState.zeros(q), 1e-3)
    assert np.array_equal(q["w"].data, [1.0, -2.0])


def test_adam_first_step_is_lr_sign():
    p = _one_param([0.0, 0.0, 0.0])
    T.adam_update(p, {"w": np.array([3.0, -0.001, 250.0])}, T.AdamState.zeros(p), 1e-4)
    # eps shifts the smallest entry by |g| / (|g| + eps) - 1 ~ 1e-5
    np.testing.assert_allclose(p["w"].data, [-1e-4, 1e-4, -1e-4], rtol=1e-4)


def test_adam_two_steps_scalar_recurrence():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = _one_param([0.5])
    st_ = T.AdamState.zeros(p)
    g1, g2 = 0.3, -0.7
    T.adam_update(p, {"w": np.array([g1])}, st_, lr, (b1, b2), eps)
    T.adam_update(p, {"w": np.array([g2])}, st_, lr, (b1, b2), eps)
    # reference recurrence written out by hand
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 ** 2
    x1 = 0.5 - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2 ** 2
    x2 = x1 - lr * (m2 / (1 - b1 ** 2)) / (math.sqrt(v2 / (1 - b2 ** 2)) + eps)
    assert abs(p["w"].data[0] - x2) < 1e-12


def test_adam_shape_mismatch():
    p = _one_param([0.0, 0.0])
    with pytest.raises(ValueError):
        T.adam_update(p, {"w": np.zeros(3)}, T.AdamState.zeros(p), 1e-3)


def test_clip_grads():
    g = {"a": np.array([30.0, 40.0]), "b": np.array([0.0])}
    norm = T.clip_grads(g, 5.0)
    assert norm == 50.0
    assert ad.global_norm(g.values()) == pytest.approx(5.0, rel=1e-15)


def test_entropy_bonus_raises_entropy(setup):
    _, _, params, world = setup
    env, carry = fresh_episode(world, params, seed=1)
    ro, _ = T.collect_rollout(env, params, carry, np.random.default_rng(0), 8, train=False)
    actions = [t.action for t in ro.transitions]

    def batch(p):
        e, c = fresh_episode(world, p, seed=1)
        r, _ = T.collect_rollout(e, p, c, None, len(actions), train=False, replay_actions=actions)
        return r

    def entropy_after(beta):
        p = params.copy()
        r = batch(p)
        T.a3c_loss(r, 0.99, 0.5, beta).backward()
        T.adam_update(p, p.grads(), T.AdamState.zeros(p), 1e-3)
        return sum(float(t.entropy.data) for t in batch(p).transitions)

    assert entropy_after(1.0) > entropy_after(0.0)


# -- training loop --------------------------------------------------------------------------
def test_train_config_validation():
    for bad in (dict(gamma=0.0), dict(gamma=1.5), dict(rollout_len=0), dict(sync_mode="hogwild"),
                dict(workers=0), dict(total_episodes=-1)):
        with pytest.raises(ValueError):
            T.TrainConfig(**bad).validate()
    with pytest.raises(ValueError):
        T.TrainConfig.from_dict({"bogus": 1})


def test_trainer_rejects_mismatched_model():
    wcfg = tiny_world_cfg()
    with pytest.raises(ValueError):
        T.train(tiny_train_cfg(), tiny_model_cfg(wcfg, n_classes=5), wcfg)


def test_zero_episodes_writes_initial_checkpoint(tmp_path):
    wcfg = tiny_world_cfg()
    mcfg = tiny_model_cfg(wcfg)
    res = T.train(tiny_train_cfg(total_episodes=0), mcfg, wcfg, tmp_path)
    assert res.episodes == 0 and res.curve == []
    init = M.ModelParams.init(mcfg, T.substream(0, "init"))
    saved = M.ModelParams.load(tmp_path / "checkpoint.json", expect=mcfg)
    for k, t in init.items():
        assert np.array_equal(t.data, saved[k].data)
    assert (tmp_path / "curve.csv").read_text().strip() == ",".join(T.CURVE_COLUMNS)


def _strip_wall(curve):
    return [{k: v for k, v in row.items() if k != "wall_s"} for row in curve]


def test_synchronous_training_is_deterministic():
    wcfg = tiny_world_cfg()
    mcfg = tiny_model_cfg(wcfg)
    a = T.train(tiny_train_cfg(), mcfg, wcfg)
    b = T.train(tiny_train_cfg(), mcfg, wcfg)
    assert _strip_wall(a.curve) == _strip_wall(b.curve)
    for k, t in a.params.items():
        assert np.array_equal(t.data, b.params[k].data)
    c = T.train(tiny_train_cfg(seed=1), mcfg, wcfg)
    assert any(not np.array_equal(t.data, c.params[k].data) for k, t in a.params.items())


def test_curve_rows_and_step_cap(tmp_path):
    wcfg = tiny_world_cfg()
    res = T.train(tiny_train_cfg(total_episodes=1000, max_env_steps=40), tiny_model_cfg(wcfg), wcfg, tmp_path)
    assert 40 <= res.env_steps < 40 + 2 * 5
    assert res.curve[0]["episodes"] == 0
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == ",".join(T.CURVE_COLUMNS) and len(lines) == len(res.curve) + 1


def test_asynchronous_mode_runs():
    wcfg = tiny_world_cfg()
    res = T.train(tiny_train_cfg(sync_mode="asynchronous", workers=3), tiny_model_cfg(wcfg), wcfg)
    assert res.episodes >= 6
    assert all(np.all(np.isfinite(t.data)) for t in res.params)


def test_evaluate_counts_and_determinism(setup):
    wcfg, _, params, _ = setup
    worlds = T.build_worlds([10, 11], wcfg)
    a = T.evaluate(params, worlds, 5, seed=3)
    b = T.evaluate(params, worlds, 5, seed=3)
    assert len(a) == 5
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
    assert all(r.success <= (r.actions[-1] == DONE) for r in a)
    with pytest.raises(EmptyInputError):
        T.evaluate(params, worlds, 0, seed=3)


def test_substreams_are_independent():
    a = T.substream(0, "world", 1).random(4)
    b = T.substream(0, "dropout", 1).random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, T.substream(0, "world", 1).random(4))
    w = T.Worker(0, [], 5)
    first = T.substream(5, "world", 0).random(3)
    w.rng_dropout.random(100)
    assert np.array_equal(w.rng_world.random(3), first)
