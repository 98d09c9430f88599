import numpy as np
import pytest

from stackelmac import baselines as bl
from stackelmac import metrics, ppo
from stackelmac.config import (EnvConfig, GameWeights, PolicyConfig, RunConfig,
                               TrainConfig)
from stackelmac.env import FollowerObs, LeaderObs, UdtsEnv
from stackelmac.errors import ArchitectureRigidityError


# ---------------------------------------------------------------------------
# adaptive slotted ALOHA
# ---------------------------------------------------------------------------

def test_aloha_initial_probability():
    pol = bl.AlohaPolicy(3, 5)
    assert pol.p == [0.5, 0.5, 0.5]


def test_aloha_collision_decay_and_success_recovery():
    pol = bl.AlohaPolicy(1, 5)
    pol.observe(0, transmitted=True, collided=True, delivered=0)
    assert pol.p[0] == pytest.approx(0.4)
    pol.observe(0, transmitted=True, collided=False, delivered=1)
    assert pol.p[0] == pytest.approx(0.45)
    pol.observe(0, transmitted=False, collided=False, delivered=0)
    assert pol.p[0] == pytest.approx(0.45)   # idle slots leave p alone


def test_aloha_empty_buffer_idles(rng):
    pol = bl.AlohaPolicy(1, 5)
    obs = FollowerObs(channel=0, buffer_bits=0, last_bitmap=None,
                      last_ucm=None, dcm_bits=None)
    for _ in range(20):
        bitmap, _ = pol.act(0, obs, rng)
        assert bitmap == (0,) * 5


def test_aloha_single_rbg_selection(rng):
    pol = bl.AlohaPolicy(1, 5, bl.AlohaConfig(p_init=0.9, p_max=0.9))
    obs = FollowerObs(channel=0, buffer_bits=256, last_bitmap=None,
                      last_ucm=None, dcm_bits=None)
    for _ in range(50):
        bitmap, _ = pol.act(0, obs, rng)
        assert sum(bitmap) in (0, 1)


def test_aloha_probability_stays_clamped(rng):
    pol = bl.AlohaPolicy(1, 3)
    for _ in range(500):
        event = rng.integers(0, 2)
        pol.observe(0, transmitted=True, collided=bool(event),
                    delivered=int(not event))
        assert 0.05 <= pol.p[0] <= 0.9


# ---------------------------------------------------------------------------
# MAPPO rigidity
# ---------------------------------------------------------------------------

@pytest.fixture
def env_cfg():
    return EnvConfig(num_ues_range=(2, 3, 5), num_rbgs=2, ucm_len=1,
                     ucm_vocab_size=4)


def test_mappo_accepts_matching_width(env_cfg, rng):
    lnet, fnet = bl.build_mappo(env_cfg, i_train=3, rng=rng)
    runner = bl.MappoRunner(env_cfg, lnet, fnet, 3)
    obs = LeaderObs(csi=(0, 1, 2), ucms=(None,) * 3, dcms=(None,) * 3)
    dcm, lp, value, vec = runner.leader_act(obs, rng)
    assert len(dcm) == 2 and all(0 <= t <= 3 for t in dcm)
    fobs = FollowerObs(channel=1, buffer_bits=256, last_bitmap=None,
                       last_ucm=None, dcm_bits=(1, 0))
    (bitmap, ucm), _, _, _ = runner.follower_act(fobs, 2, 3, rng)
    assert len(bitmap) == 2 and len(ucm) == 1


def test_mappo_rigidity_error_on_wrong_width(env_cfg, rng):
    lnet, fnet = bl.build_mappo(env_cfg, i_train=3, rng=rng)
    runner = bl.MappoRunner(env_cfg, lnet, fnet, 3)
    obs5 = LeaderObs(csi=(0,) * 5, ucms=(None,) * 5, dcms=(None,) * 5)
    with pytest.raises(ArchitectureRigidityError):
        runner.leader_act(obs5, rng)
    fobs = FollowerObs(channel=0, buffer_bits=0, last_bitmap=None,
                       last_ucm=None, dcm_bits=None)
    with pytest.raises(ArchitectureRigidityError):
        runner.follower_act(fobs, 4, 5, rng)   # UE index beyond build size


def test_mappo_adapter_mode_runs_and_flags(env_cfg, rng, weights):
    lnet, fnet = bl.build_mappo(env_cfg, i_train=3, rng=rng, mode="G",
                                adapter=True)
    runner = bl.MappoRunner(env_cfg, lnet, fnet, 3)
    driver = metrics.MappoDriver(runner)
    assert driver.adapted is True
    env = UdtsEnv(env_cfg, weights, 5, seed=2)
    trace = metrics.run_episode(env, driver, rng)
    out = metrics.kpis(trace)
    assert all(np.isfinite(v) for v in out.values())


def test_dictator_copies_intent_bits():
    pol = bl.DictatorPolicy(ucm_len=2)
    bitmap, ucm = pol.act((1, 0, 1))
    assert bitmap == (1, 0, 1) and ucm == (0, 0)


# ---------------------------------------------------------------------------
# shared PPO loss arithmetic
# ---------------------------------------------------------------------------

def test_mappo_uses_the_same_surrogate_code():
    # identity of code, not merely of behavior
    assert bl.clipped_surrogate_objective is ppo.clipped_surrogate_objective


def test_surrogate_identity_on_synthetic_batch(rng):
    tc = TrainConfig()
    new = rng.normal(size=32)
    old = new - rng.normal(scale=0.1, size=32)
    adv = rng.normal(size=32)
    kl = np.abs(rng.normal(scale=0.01, size=32))
    ent = np.abs(rng.normal(size=32))
    a = ppo.clipped_surrogate_objective(new, old, adv, kl, ent, tc)
    b = bl.clipped_surrogate_objective(new, old, adv, kl, ent, tc)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])


# ---------------------------------------------------------------------------
# MAPPO-S training smoke + G-mode cross-size contrast
# ---------------------------------------------------------------------------

def _mappo_config():
    return RunConfig(
        env=EnvConfig(num_ues_range=(2, 5), num_rbgs=2, episode_len=6,
                      arrival_probs=(0.8,), tbler=0.0, spectral_eff=(2.0,),
                      channel_transition=((1.0,),), csi_error_prob=0.0,
                      ucm_len=1, ucm_vocab_size=4),
        policy=PolicyConfig(n_blocks=1, d_model=16, n_heads=2, d_ff=24,
                            max_seq_len=64, i_max=6),
        train=TrainConfig(max_epochs=6, buffer_episodes=2, minibatch_size=32,
                          ppo_epochs=2))


def test_mappo_s_trains_and_evaluates():
    cfg = _mappo_config()
    lnet, fnet, logs = bl.train_mappo(cfg, i_train=2, seed=1)
    assert len(logs) == 6
    assert all(np.isfinite(r["leader_utility"]) for r in logs)
    runner = bl.MappoRunner(cfg.env, lnet, fnet, 2)
    env = UdtsEnv(cfg.env, GameWeights(), 2, seed=5)
    trace = metrics.run_episode(env, metrics.MappoDriver(runner),
                                np.random.default_rng(0))
    assert np.isfinite(metrics.kpis(trace)["throughput_dpdus_per_ue_tti"])


def test_mappo_g_cross_size_raises_without_adapter():
    cfg = _mappo_config()
    lnet, fnet, _ = bl.train_mappo(cfg, i_train=2, seed=1, max_epochs=2)
    runner = bl.MappoRunner(cfg.env, lnet, fnet, 2)
    env = UdtsEnv(cfg.env, GameWeights(), 5, seed=5)
    with pytest.raises(ArchitectureRigidityError):
        metrics.run_episode(env, metrics.MappoDriver(runner),
                            np.random.default_rng(0))
