import os

import numpy as np
import pytest

from stackelmac import policy as pol
from stackelmac.config import EnvConfig, PolicyConfig
from stackelmac.env import FollowerObs, LeaderObs, UdtsEnv
from stackelmac.errors import CheckpointError, ContractError


@pytest.fixture
def env_config():
    return EnvConfig(num_ues_range=(1, 2, 3), num_rbgs=2, ucm_len=2,
                     ucm_vocab_size=4)


@pytest.fixture
def leader(env_config, tiny_policy_config):
    return pol.TokenPolicy("leader", tiny_policy_config, env_config,
                           rng=np.random.default_rng(1))


@pytest.fixture
def follower(env_config, tiny_policy_config):
    return pol.TokenPolicy("follower", tiny_policy_config, env_config,
                           rng=np.random.default_rng(2))


def _fresh_follower_obs():
    return FollowerObs(channel=0, buffer_bits=256, last_bitmap=None,
                       last_ucm=None, dcm_bits=None)


def _fresh_leader_obs(i):
    return LeaderObs(csi=(0,) * i, ucms=(None,) * i, dcms=(None,) * i)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def test_singleton_masks_give_deterministic_zero_logprob(follower, rng):
    prompt = follower.serialize(_fresh_follower_obs())
    forced = [np.array([ids[0]]) for ids in follower.masks(2)]
    follower.masks = lambda i_t: forced   # singleton grammar at every position
    act, _ = follower.generate(prompt, 2, temperature=1.0, rng=rng)
    assert np.array_equal(act.tokens, np.array([ids[0] for ids in forced]))
    assert act.total_logprob == 0.0
    assert np.all(act.logprobs == 0.0)


def test_uniform_logits_sample_uniformly(env_config, tiny_policy_config):
    follower = pol.TokenPolicy("follower", tiny_policy_config, env_config,
                               rng=np.random.default_rng(3))
    for k in follower.params:
        follower.params[k] = np.zeros_like(follower.params[k])
    prompt = follower.serialize(_fresh_follower_obs())
    space = follower.enumerate_actions(2)
    scores = follower.score_actions(prompt, space, 2)
    # 2 bitmap positions x {0,1} and 2 UCM positions x 4 symbols
    assert np.allclose(np.exp(scores), 1.0 / (4 * 16), atol=1e-12)
    counts = {}
    rng = np.random.default_rng(4)
    n = 4000
    for _ in range(n):
        act, _ = follower.generate(prompt, 2, 1.0, rng)
        key = act.tokens[:2].tobytes()
        counts[key] = counts.get(key, 0) + 1
    for c in counts.values():
        assert abs(c / n - 0.25) < 0.05


def test_sequence_probabilities_sum_to_one(leader, follower, tiny_policy_config):
    lp = leader.serialize(_fresh_leader_obs(2))
    scores = leader.score_actions(lp, leader.enumerate_actions(2), 2)
    assert len(scores) == 9          # (I+1)^M at I=2, M=2
    assert abs(np.exp(scores).sum() - 1.0) < 1e-9
    fp = follower.serialize(_fresh_follower_obs())
    fscores = follower.score_actions(fp, follower.enumerate_actions(2), 2)
    assert abs(np.exp(fscores).sum() - 1.0) < 1e-9
    # 27-sequence case: three RBGs
    cfg3 = EnvConfig(num_ues_range=(2,), num_rbgs=3, ucm_len=1, ucm_vocab_size=4)
    leader3 = pol.TokenPolicy("leader", tiny_policy_config, cfg3,
                              rng=np.random.default_rng(9))
    lp3 = leader3.serialize(_fresh_leader_obs(2))
    scores3 = leader3.score_actions(lp3, leader3.enumerate_actions(2), 2)
    assert len(scores3) == 27
    assert abs(np.exp(scores3).sum() - 1.0) < 1e-9


def test_rescoring_consistency_exact(leader, rng):
    prompt = leader.serialize(_fresh_leader_obs(3))
    act, _ = leader.generate(prompt, 3, temperature=0.7, rng=rng)
    total, per = leader.action_logprob(prompt, act.tokens, 3, temperature=0.7)
    assert total == act.total_logprob
    assert np.array_equal(per, act.logprobs)


def test_exact_mode_agrees_with_per_token_product(leader, rng):
    prompt = leader.serialize(_fresh_leader_obs(2))
    act, _ = leader.generate(prompt, 2, temperature=1.0, rng=rng)
    exact = leader.action_logprob_exact(prompt, act.tokens, 2)
    total, _ = leader.action_logprob(prompt, act.tokens, 2)
    assert abs(exact - total) < 1e-9


def test_masked_out_token_rejected(leader):
    prompt = leader.serialize(_fresh_leader_obs(2))
    bad = np.array([leader.vocab.NULL, leader.vocab.num(0)])
    with pytest.raises(ContractError):
        leader.action_logprob(prompt, bad, 2)


def test_generate_rejects_nonpositive_temperature(leader, rng):
    prompt = leader.serialize(_fresh_leader_obs(2))
    with pytest.raises(ContractError):
        leader.generate(prompt, 2, temperature=0.0, rng=rng)


# ---------------------------------------------------------------------------
# value head
# ---------------------------------------------------------------------------

def test_value_zero_at_init_and_deterministic(leader):
    prompt = leader.serialize(_fresh_leader_obs(3))
    assert leader.value(prompt) == 0.0
    leader.params["vhead.w2"][:, 0] = 0.01
    v1 = leader.value(prompt)
    assert v1 == leader.value(prompt) and v1 != 0.0


def test_value_gradient_matches_finite_differences(leader):
    prompt = leader.serialize(_fresh_leader_obs(2))
    leader.params["vhead.w2"][:, 0] = np.linspace(-0.02, 0.02,
                                                  leader.params["vhead.w2"].shape[0])
    toks = np.asarray(prompt)[None, :]
    _, _, cache = leader.model.forward(leader.params, toks, need_cache=True)
    grads = leader.model.backward(leader.params, cache,
                                  np.zeros((1, len(prompt), leader.vocab.size)),
                                  np.array([1.0]))
    h = 1e-6
    crng = np.random.default_rng(5)
    worst = 0.0
    for name in leader.params:
        g = grads[name]
        for flat in crng.choice(g.size, size=min(3, g.size), replace=False):
            idx = np.unravel_index(flat, g.shape)
            saved = leader.params[name][idx]
            leader.params[name][idx] = saved + h
            up = leader.value(prompt)
            leader.params[name][idx] = saved - h
            dn = leader.value(prompt)
            leader.params[name][idx] = saved
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(1.0, abs(fd), abs(g[idx])))
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# greedy decoding
# ---------------------------------------------------------------------------

def test_greedy_uniform_logits_picks_lowest_ids(env_config, tiny_policy_config):
    leader = pol.TokenPolicy("leader", tiny_policy_config, env_config,
                             rng=np.random.default_rng(3))
    for k in leader.params:
        leader.params[k] = np.zeros_like(leader.params[k])
    prompt = leader.serialize(_fresh_leader_obs(2))
    act = leader.greedy(prompt, 2)
    assert np.array_equal(act.tokens, [leader.vocab.num(0)] * 2)


def test_greedy_matches_singleton_generation(follower, rng):
    prompt = follower.serialize(_fresh_follower_obs())
    forced = [np.array([ids[1]]) for ids in follower.masks(2)]
    follower.masks = lambda i_t: forced
    gen, _ = follower.generate(prompt, 2, 1.0, rng)
    grd = follower.greedy(prompt, 2)
    assert np.array_equal(gen.tokens, grd.tokens)


def test_argmax_invariant_under_temperature_scaling(rng):
    # the greedy rule ignores temperature: argmax(z/T) == argmax(z) for T > 0
    for _ in range(200):
        z = rng.normal(size=8)
        ids = np.arange(8)
        picks = {float(t): ids[np.argmax(z / t)] for t in (0.25, 1.0, 3.0)}
        assert len(set(picks.values())) == 1


# ---------------------------------------------------------------------------
# grammar validity and variable-length operation
# ---------------------------------------------------------------------------

def test_masks_respected_across_roles_and_sizes(tiny_policy_config, rng):
    cfg = EnvConfig(num_ues_range=(1, 2, 3, 4, 5, 6), num_rbgs=2,
                    ucm_len=2, ucm_vocab_size=4)
    leader = pol.TokenPolicy("leader", tiny_policy_config, cfg,
                             rng=np.random.default_rng(11))
    follower = pol.TokenPolicy("follower", tiny_policy_config, cfg,
                               rng=np.random.default_rng(12))
    for trial in range(300):
        i_t = int(rng.integers(1, 7))
        role = (leader, follower)[trial % 2]
        if role is leader:
            prompt = leader.serialize(_fresh_leader_obs(i_t))
        else:
            prompt = follower.serialize(_fresh_follower_obs())
        act, _ = role.generate(prompt, i_t, temperature=1.5, rng=rng)
        for j, ids in enumerate(role.masks(i_t)):
            assert act.tokens[j] in ids


def test_one_bundle_covers_all_ue_counts(tiny_policy_config, rng):
    cfg = EnvConfig(num_ues_range=tuple(range(1, 11)), num_rbgs=2,
                    ucm_len=1, ucm_vocab_size=4)
    pc = PolicyConfig(n_blocks=1, d_model=16, n_heads=2, d_ff=24,
                      max_seq_len=128, i_max=10)
    leader = pol.TokenPolicy("leader", pc, cfg, rng=np.random.default_rng(0))
    shapes = {k: v.shape for k, v in leader.params.items()}
    for i in range(1, 11):
        prompt = leader.serialize(_fresh_leader_obs(i))
        act, _ = leader.generate(prompt, i, 1.0, rng)
        assert len(act.tokens) == cfg.num_rbgs
    assert {k: v.shape for k, v in leader.params.items()} == shapes


def test_masked_entropy_nondecreasing_in_temperature(rng):
    for _ in range(100):
        z = rng.normal(scale=3.0, size=6)
        ents = []
        for t in (0.3, 0.7, 1.0, 2.0, 5.0):
            lp = pol.masked_logprobs(np.concatenate([z, [50.0]]),
                                     np.arange(6), temperature=t)
            p = np.exp(lp)
            ents.append(float(-(p * lp).sum()))
        assert all(b >= a - 1e-12 for a, b in zip(ents, ents[1:]))


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, leader):
    path = os.path.join(tmp_path, "leader.npz")
    pol.save_checkpoint(path, leader, config_hash="cafebabe", epoch=7)
    loaded, meta = pol.load_checkpoint(path)
    assert meta["epoch"] == 7 and meta["config_hash"] == "cafebabe"
    assert meta["compat_hash"] == leader.compat_hash()
    assert set(loaded.params) == set(leader.params)
    for k in leader.params:
        assert np.array_equal(loaded.params[k], leader.params[k])
    assert loaded.role == "leader"


def test_corrupted_checkpoint_raises(tmp_path):
    path = os.path.join(tmp_path, "bad.npz")
    with open(path, "wb") as fh:
        fh.write(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        pol.load_checkpoint(path)


def test_checkpoint_feeds_environment_rollout(tmp_path, leader, env_config,
                                              weights, rng):
    path = os.path.join(tmp_path, "l.npz")
    pol.save_checkpoint(path, leader)
    loaded, _ = pol.load_checkpoint(path)
    env = UdtsEnv(env_config, weights, 2, seed=3)
    prompt = loaded.serialize(env.leader_observation())
    act = loaded.greedy(prompt, 2)
    assert len(loaded.decode(act.tokens)) == env.config.num_rbgs
