import itertools
from fractions import Fraction

import numpy as np
import pytest

from coto.plant import PlantConfig
from coto.policy import PolicyParams, evaluate
from coto.rl import (
    BcConfig,
    Buffers,
    Optimizers,
    PpoConfig,
    SlPair,
    Transition,
    UpdateAborted,
    bc_loss,
    bc_update,
    clipped_surrogate,
    compute_gae,
    ppo_loss,
    ppo_update,
)


def small_policy(seed, scale=0.4):
    rng = np.random.default_rng(seed)
    params = PolicyParams.init(rng, PlantConfig(), hidden=(6, 5))
    for p in params.actor.params + params.critic.params:
        p += rng.normal(size=p.shape) * scale
    return params


def brute_force_gae(rewards, values, seg_ids, boot, gamma, lam):
    # sum_l (gamma*lam)^l delta_{t+l} over the remainder of the segment, in exact arithmetic
    n = len(rewards)
    out = []
    for t in range(n):
        total = Fraction(0)
        k = t
        while k < n and seg_ids[k] == seg_ids[t]:
            nxt = values[k + 1] if k + 1 < n and seg_ids[k + 1] == seg_ids[t] else boot[seg_ids[t]]
            delta = rewards[k] + gamma * nxt - values[k]
            total += (gamma * lam) ** (k - t) * delta
            k += 1
        out.append(total)
    return out


def compositions(n):
    for cuts in itertools.product([0, 1], repeat=n - 1):
        ids, s = [0], 0
        for c in cuts:
            s += c
            ids.append(s)
        yield ids


def test_gae_base_case():
    adv, ret = compute_gae([1.5], [0.25], [0], {0: 2.0}, 0.9, 0.95)
    assert adv[0] == pytest.approx(1.5 + 0.9 * 2.0 - 0.25)
    assert ret[0] == pytest.approx(adv[0] + 0.25)


def test_gae_empty():
    adv, ret = compute_gae([], [], [], {}, 0.99, 0.95)
    assert adv.shape == (0,) and ret.shape == (0,)


def test_gae_lambda_one_is_discounted_return_minus_value():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=5), rng.normal(size=5)
    boot = 0.7
    adv, _ = compute_gae(r, v, [0] * 5, {0: boot}, 0.9, 1.0)
    for t in range(5):
        g = sum(0.9**k * r[t + k] for k in range(5 - t)) + 0.9 ** (5 - t) * boot
        assert adv[t] == pytest.approx(g - v[t], abs=1e-12)


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=6), rng.normal(size=6)
    adv, _ = compute_gae(r, v, [0] * 6, {0: -0.3}, 0.99, 1e-300)
    nxt = np.r_[v[1:], -0.3]
    assert np.allclose(adv, r + 0.99 * nxt - v, atol=1e-12)


@pytest.mark.parametrize("n", range(1, 7))
def test_gae_exhaustive_small_segments_exact(n):
    # dyadic data and discounts keep every float operation exact
    rng = np.random.default_rng(n)
    gamma, lam = 0.5, 0.75
    for ids in compositions(n):
        r = [int(x) for x in rng.integers(-8, 9, n)]
        v = [int(x) for x in rng.integers(-8, 9, n)]
        boot = {s: int(rng.integers(-8, 9)) for s in set(ids)}
        adv, ret = compute_gae(r, v, ids, boot, gamma, lam)
        oracle = brute_force_gae(r, v, ids, boot, Fraction(gamma), Fraction(lam))
        assert [Fraction(a) for a in adv] == oracle
        assert np.array_equal(ret, adv + np.array(v, dtype=float))


def test_gae_segments_are_independent():
    rng = np.random.default_rng(2)
    r, v = rng.normal(size=7), rng.normal(size=7)
    ids = [0, 0, 0, 1, 1, 2, 2]
    boot = {0: 0.3, 1: -1.0, 2: 0.0}
    adv, _ = compute_gae(r, v, ids, boot, 0.99, 0.95)
    a0, _ = compute_gae(r[:3], v[:3], [0] * 3, {0: 0.3}, 0.99, 0.95)
    a2, _ = compute_gae(r[5:], v[5:], [2] * 2, {2: 0.0}, 0.99, 0.95)
    assert np.array_equal(adv[:3], a0) and np.array_equal(adv[5:], a2)


def test_clip_arithmetic():
    obj, grad = clipped_surrogate(np.array([2.0]), np.array([1.5]), 0.2)
    assert obj[0] == pytest.approx(1.2 * 1.5) and grad[0] == 0.0
    obj, grad = clipped_surrogate(np.array([0.5]), np.array([-1.0]), 0.2)
    assert obj[0] == pytest.approx(-0.8) and grad[0] == 0.0
    obj, grad = clipped_surrogate(np.array([1.1]), np.array([2.0]), 0.2)
    assert obj[0] == pytest.approx(2.2) and grad[0] == 2.0
    # pessimistic side stays unclipped
    obj, grad = clipped_surrogate(np.array([0.5]), np.array([1.0]), 0.2)
    assert obj[0] == 0.5 and grad[0] == 1.0


def batch(params, n, seed, jitter=0.0):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(n, 7))
    actions = rng.uniform(0.05, 0.95, (n, 2))
    ev = evaluate(params, obs, actions)
    logp_old = ev.log_prob + rng.normal(size=n) * jitter
    return obs, actions, logp_old, rng.normal(size=n), rng.normal(size=n)


def test_ratio_is_one_at_old_params():
    params = small_policy(0)
    obs, act, lp, adv, ret = batch(params, 10, 0)
    _, stats, _, _ = ppo_loss(params, obs, act, lp, adv, ret, PpoConfig())
    assert stats["surrogate"] == pytest.approx(adv.mean(), abs=1e-15)
    assert stats["kl"] == 0.0 and stats["clip_frac"] == 0.0


def test_clipped_surrogate_gradient_matches_finite_differences():
    params = small_policy(1)
    obs, act, lp, adv, ret = batch(params, 10, 1, jitter=0.15)
    cfg = PpoConfig(value_coef=0.0)
    _, _, ga, _ = ppo_loss(params, obs, act, lp, adv, ret, cfg)
    eps = 1e-6
    for p, g in zip(params.actor.params, ga):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            fp = ppo_loss(params, obs, act, lp, adv, ret, cfg, with_grads=False)[0]
            p[idx] = old - eps
            fm = ppo_loss(params, obs, act, lp, adv, ret, cfg, with_grads=False)[0]
            p[idx] = old
            num = (fp - fm) / (2 * eps)
            assert abs(num - g[idx]) <= 1e-4 * max(1.0, abs(g[idx]))


def test_value_and_entropy_gradients_match_finite_differences():
    params = small_policy(2)
    obs, act, lp, adv, ret = batch(params, 8, 2, jitter=0.1)
    cfg = PpoConfig(entropy_coef=0.01)
    _, _, ga, gc = ppo_loss(params, obs, act, lp, adv, ret, cfg)
    eps = 1e-6
    for net, grads in ((params.actor, ga), (params.critic, gc)):
        for p, g in zip(net.params, grads):
            for idx in list(np.ndindex(p.shape))[:12]:
                old = p[idx]
                p[idx] = old + eps
                fp = ppo_loss(params, obs, act, lp, adv, ret, cfg, with_grads=False)[0]
                p[idx] = old - eps
                fm = ppo_loss(params, obs, act, lp, adv, ret, cfg, with_grads=False)[0]
                p[idx] = old
                assert abs((fp - fm) / (2 * eps) - g[idx]) <= 1e-4 * max(1.0, abs(g[idx]))


def as_batch(obs, act, lp, adv, ret):
    return {"obs": obs, "actions": act, "logp_old": lp, "advantages": adv, "returns": ret}


def test_zero_advantage_leaves_actor_unchanged():
    params = small_policy(3)
    obs, act, lp, _, ret = batch(params, 32, 3)
    before = [p.copy() for p in params.actor.params]
    critic_before = [p.copy() for p in params.critic.params]
    ppo_update(params, Optimizers.for_policy(params), as_batch(obs, act, lp, np.zeros(32), ret), PpoConfig(), np.random.default_rng(0))
    assert all(np.array_equal(a, b) for a, b in zip(before, params.actor.params))
    assert any(not np.array_equal(a, b) for a, b in zip(critic_before, params.critic.params))


def test_single_positive_advantage_raises_log_prob():
    params = small_policy(4)
    obs, act, lp, _, ret = batch(params, 1, 4)
    cfg = PpoConfig(epochs=1)
    ppo_update(params, Optimizers.for_policy(params), as_batch(obs, act, lp, np.array([1.0]), ret), cfg, np.random.default_rng(0))
    assert evaluate(params, obs, act).log_prob[0] > lp[0]


def test_ppo_update_aborts_and_restores_on_non_finite_loss():
    params = small_policy(5)
    obs, act, lp, adv, ret = batch(params, 4, 5)
    ret[2] = np.nan
    before = [p.copy() for p in params.actor.params + params.critic.params]
    with pytest.raises(UpdateAborted):
        ppo_update(params, Optimizers.for_policy(params), as_batch(obs, act, lp, adv, ret), PpoConfig(), np.random.default_rng(0))
    assert all(np.array_equal(a, b) for a, b in zip(before, params.actor.params + params.critic.params))


def test_ppo_update_stats_record():
    params = small_policy(6)
    stats = ppo_update(params, Optimizers.for_policy(params), as_batch(*batch(params, 100, 6)), PpoConfig(epochs=2), np.random.default_rng(0))
    assert stats["n"] == 100
    assert all(np.isfinite(stats[k]) for k in ("surrogate", "value_loss", "entropy", "kl", "grad_norm"))


def test_bc_zero_loss_at_mode():
    params = small_policy(7)
    obs = np.random.default_rng(7).normal(size=(5, 7))
    mode = evaluate(params, obs).mode
    loss, grads = bc_loss(params, obs, mode)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_bc_converges_on_single_pair():
    params = PolicyParams.init(np.random.default_rng(8))
    obs = np.array([[2.0, 0.5, 0.0, 0.3, 0.0, 0.0, 0.1]])
    pair = SlPair(obs[0], np.array([0.8, 0.25]))
    bc_update(params, Optimizers.for_policy(params), obs, [pair.expert_action_unit], BcConfig(epochs=200), np.random.default_rng(0))
    assert np.all(np.abs(evaluate(params, obs).mode[0] - pair.expert_action_unit) < 1e-2)


def test_bc_loss_flat_along_mode_level_set():
    params = small_policy(9)
    obs = np.random.default_rng(9).normal(size=(1, 7))
    expert = np.array([[0.3, 0.7]])
    ev = evaluate(params, obs)
    m, raw = ev.mode[0], ev.raw[0]
    sig = 1.0 / (1.0 + np.exp(-raw))
    # d alpha = m, d beta = 1 - m keeps (alpha - 1) / (alpha + beta - 2) fixed; map through softplus'
    direction = np.r_[m / sig[:2], (1 - m) / sig[2:]]
    across = np.r_[(1 - m) / sig[:2], -m / sig[2:]]
    bias = params.actor.params[-1]
    _, grads = bc_loss(params, obs, expert)
    assert abs(float(grads[-1] @ direction)) < 1e-12
    assert abs(float(grads[-1] @ across)) > 1e-3
    eps = 1e-5

    def loss_at(d):
        bias[...] += d
        params.actor.bump()
        val = bc_loss(params, obs, expert, with_grads=False)[0]
        bias[...] -= d
        params.actor.bump()
        return val

    assert abs(loss_at(eps * direction) - loss_at(-eps * direction)) / (2 * eps) < 1e-8


def test_bc_mode_gradient_matches_finite_differences():
    params = small_policy(10)
    rng = np.random.default_rng(10)
    obs, expert = rng.normal(size=(6, 7)), rng.uniform(0.1, 0.9, (6, 2))
    _, grads = bc_loss(params, obs, expert)
    eps = 1e-6
    for p, g in zip(params.actor.params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            fp = bc_loss(params, obs, expert, with_grads=False)[0]
            p[idx] = old - eps
            fm = bc_loss(params, obs, expert, with_grads=False)[0]
            p[idx] = old
            assert abs((fp - fm) / (2 * eps) - g[idx]) <= 1e-4 * max(1.0, abs(g[idx]))


def test_bc_update_never_touches_critic():
    params = small_policy(11)
    rng = np.random.default_rng(11)
    before = [p.copy() for p in params.critic.params]
    opt = Optimizers.for_policy(params)
    bc_update(params, opt, rng.normal(size=(50, 7)), rng.uniform(0.1, 0.9, (50, 2)), BcConfig(epochs=3), rng)
    assert all(np.array_equal(a, b) for a, b in zip(before, params.critic.params))
    assert opt.critic.t == 0


def test_sl_pair_clamps_expert():
    pair = SlPair(np.zeros(7), np.array([0.0, 1.0]))
    assert 0 < pair.expert_action_unit[0] and pair.expert_action_unit[1] < 1


@pytest.mark.parametrize("bad", [dict(gamma=0.0), dict(lambda_gae=1.5), dict(clip_eps=0.0)])
def test_ppo_config_validation(bad):
    with pytest.raises(ValueError):
        PpoConfig(**bad)


def test_buffers_bootstrap_truncated_and_terminal_segments():
    params = small_policy(12)
    rng = np.random.default_rng(12)
    buf = Buffers()
    for seg in (0, 1):
        for _ in range(3):
            buf.ppo.append(Transition(rng.normal(size=7), rng.uniform(0.1, 0.9, 2), -1.0, float(rng.normal()), float(rng.normal()), False, seg))
        buf.seg_next_obs[seg] = rng.normal(size=7)
    buf.seg_terminal[1] = True
    buf.sl.append(SlPair(np.zeros(7), np.array([0.5, 0.5])))
    b = buf.ppo_batch(params, PpoConfig())
    tr = buf.ppo
    v_boot = float(params.critic(buf.seg_next_obs[0])[0])
    adv0, _ = compute_gae([t.reward for t in tr[:3]], [t.value_old for t in tr[:3]], [0] * 3, {0: v_boot}, 0.99, 0.95)
    adv1, _ = compute_gae([t.reward for t in tr[3:]], [t.value_old for t in tr[3:]], [1] * 3, {1: 0.0}, 0.99, 0.95)
    assert np.allclose(b["advantages"], np.r_[adv0, adv1], atol=1e-12)
    buf.clear(keep_sl=True)
    assert not buf.ppo and len(buf.sl) == 1
    buf.clear()
    assert not buf.sl
