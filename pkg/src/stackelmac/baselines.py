"""Comparison policies: adaptive slotted-ALOHA and fixed-architecture MAPPO.

The MAPPO nets are deliberately rigid: observation widths are bound to the
UE count they were built for, and feeding a different width raises
ArchitectureRigidityError (that error is itself a tested contract, the
generalization-failure contrast).  An optional zero-pad/truncate adapter
lets the G-mode net run cross-size anyway, flagged as adapted.
"""

from dataclasses import dataclass

import numpy as np

from . import game
from .env import UdtsEnv
from .errors import ArchitectureRigidityError, ContractError
from .ppo import (Adam, Transition, TrajectoryBuffer, clipped_surrogate_objective,
                  finalize_episode, reward_scales)


# ---------------------------------------------------------------------------
# Enhanced slotted ALOHA
# ---------------------------------------------------------------------------

@dataclass
class AlohaConfig:
    p_init: float = 0.5
    decay: float = 0.8       # multiplicative on collision
    recover: float = 0.05    # additive on success
    p_min: float = 0.05
    p_max: float = 0.9


class AlohaPolicy:
    """Per-UE transmit probability, decayed on collision, recovered on success."""

    def __init__(self, num_ues, num_rbgs, config=None):
        self.cfg = config or AlohaConfig()
        self.num_rbgs = num_rbgs
        self.p = [self.cfg.p_init] * num_ues

    def act(self, ue_index, obs, rng):
        """Transmit one dPDU on a uniformly random RBG with probability p."""
        bitmap = [0] * self.num_rbgs
        if obs.buffer_bits > 0 and rng.random() < self.p[ue_index]:
            bitmap[int(rng.random() * self.num_rbgs)] = 1
        return tuple(bitmap), None

    def observe(self, ue_index, transmitted, collided, delivered):
        c = self.cfg
        if not transmitted:
            return
        if collided:
            self.p[ue_index] = max(c.p_min, self.p[ue_index] * c.decay)
        elif delivered > 0:
            self.p[ue_index] = min(c.p_max, self.p[ue_index] + c.recover)


# ---------------------------------------------------------------------------
# MAPPO: fixed-width MLP actor/critic over flat numeric observations.
# ---------------------------------------------------------------------------

def leader_obs_vector(obs, num_ues, n_states, num_rbgs, ucm_len, ucm_vocab):
    """Concatenated per-UE blocks: csi one-hot, UCM one-hots, intent bits."""
    if len(obs.csi) != num_ues:
        raise ArchitectureRigidityError(
            f"leader net built for {num_ues} UEs, observation covers {len(obs.csi)}")
    parts = []
    for csi, ucm, dcm in zip(obs.csi, obs.ucms, obs.dcms):
        block = np.zeros(n_states + ucm_len * ucm_vocab + num_rbgs)
        block[csi] = 1.0
        if ucm is not None:
            for j, sym in enumerate(ucm):
                block[n_states + j * ucm_vocab + int(sym)] = 1.0
        if dcm is not None:
            block[n_states + ucm_len * ucm_vocab:] = np.asarray(dcm, dtype=np.float64)
        parts.append(block)
    return np.concatenate(parts)


def follower_obs_vector(obs, ue_index, num_ues, n_states, num_rbgs, ucm_len,
                        ucm_vocab, dpdu_bits):
    """UE one-hot (width = build-time UE count), channel, buffer, history."""
    if ue_index >= num_ues:
        raise ArchitectureRigidityError(
            f"follower net built for {num_ues} UEs, saw UE index {ue_index}")
    vec = np.zeros(num_ues + n_states + 1 + 2 * num_rbgs + ucm_len * ucm_vocab)
    vec[ue_index] = 1.0
    vec[num_ues + obs.channel] = 1.0
    off = num_ues + n_states
    vec[off] = min(obs.buffer_bits // dpdu_bits, 15) / 15.0
    off += 1
    if obs.last_bitmap is not None:
        vec[off:off + num_rbgs] = np.asarray(obs.last_bitmap, dtype=np.float64)
    off += num_rbgs
    if obs.last_ucm is not None:
        for j, sym in enumerate(obs.last_ucm):
            vec[off + j * ucm_vocab + int(sym)] = 1.0
    off += ucm_len * ucm_vocab
    if obs.dcm_bits is not None:
        vec[off:off + num_rbgs] = np.asarray(obs.dcm_bits, dtype=np.float64)
    return vec


class MappoNet:
    """Two-hidden-layer tanh MLP actor plus a separate value MLP.

    Head layout mirrors the token policy's per-position masked categorical
    structure: the flat output is sliced into per-position logit groups.
    """

    def __init__(self, role, in_dim, head_widths, hidden=128, rng=None,
                 mode="S", adapter=False):
        self.role = role
        self.mode = mode
        self.adapter = adapter
        self.in_dim = int(in_dim)
        self.head_widths = tuple(int(w) for w in head_widths)
        out_dim = sum(self.head_widths)
        rng = rng or np.random.default_rng(0)
        s = 0.1

        def uni(*shape):
            return rng.uniform(-s, s, size=shape)

        self.params = {
            "w1": uni(in_dim, hidden), "b1": np.zeros(hidden),
            "w2": uni(hidden, hidden), "b2": np.zeros(hidden),
            "w3": uni(hidden, out_dim), "b3": np.zeros(out_dim),
            "vw1": uni(in_dim, hidden), "vb1": np.zeros(hidden),
            "vw2": np.zeros((hidden, 1)), "vb2": np.zeros(1),
        }
        self._offsets = np.cumsum((0,) + self.head_widths)

    def _check_dim(self, x):
        if x.shape[-1] == self.in_dim:
            return x
        if self.adapter:
            flagged = np.zeros(x.shape[:-1] + (self.in_dim,))
            n = min(self.in_dim, x.shape[-1])
            flagged[..., :n] = x[..., :n]
            return flagged
        raise ArchitectureRigidityError(
            f"{self.role} MAPPO net expects observation width {self.in_dim}, "
            f"got {x.shape[-1]}; fixed architectures need redesign/retraining "
            f"when the network size changes")

    def forward(self, x, need_cache=False):
        x = self._check_dim(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        h1 = np.tanh(x @ self.params["w1"] + self.params["b1"])
        h2 = np.tanh(h1 @ self.params["w2"] + self.params["b2"])
        logits = h2 @ self.params["w3"] + self.params["b3"]
        a1 = np.tanh(x @ self.params["vw1"] + self.params["vb1"])
        values = (a1 @ self.params["vw2"] + self.params["vb2"])[:, 0]
        cache = (x, h1, h2, a1) if need_cache else None
        return logits, values, cache

    def backward(self, cache, dlogits, dvalues):
        x, h1, h2, a1 = cache
        g = {}
        g["w3"] = h2.T @ dlogits
        g["b3"] = dlogits.sum(axis=0)
        dh2 = (dlogits @ self.params["w3"].T) * (1 - h2 * h2)
        g["w2"] = h1.T @ dh2
        g["b2"] = dh2.sum(axis=0)
        dh1 = (dh2 @ self.params["w2"].T) * (1 - h1 * h1)
        g["w1"] = x.T @ dh1
        g["b1"] = dh1.sum(axis=0)
        dv = np.asarray(dvalues, dtype=np.float64)[:, None]
        g["vw2"] = a1.T @ dv
        g["vb2"] = dv.sum(axis=0)
        da1 = (dv @ self.params["vw2"].T) * (1 - a1 * a1)
        g["vw1"] = x.T @ da1
        g["vb1"] = da1.sum(axis=0)
        return g

    def heads(self, logits_row):
        return [logits_row[self._offsets[i]:self._offsets[i + 1]]
                for i in range(len(self.head_widths))]

    def act(self, obs_vec, rng, temperature=1.0, greedy=False):
        """Sample (or argmax) each head; returns (choices, total logprob, value)."""
        logits, values, _ = self.forward(obs_vec)
        choices, total = [], 0.0
        for head in self.heads(logits[0]):
            z = head / temperature
            z = z - z.max()
            lp = z - np.log(np.exp(z).sum())
            if greedy:
                idx = int(np.argmax(head))
            else:
                idx = int((np.cumsum(np.exp(lp)) < rng.random()).sum())
                idx = min(idx, len(head) - 1)
            choices.append(idx)
            total += float(lp[idx])
        return choices, total, float(values[0])


def build_mappo(env_config, i_train, hidden=128, rng=None, mode="S", adapter=False):
    """Leader + shared-follower MAPPO nets bound to (i_train, M)."""
    n_states = env_config.n_channel_states
    m, k, v = env_config.num_rbgs, env_config.ucm_len, env_config.ucm_vocab_size
    leader_in = i_train * (n_states + k * v + m)
    follower_in = i_train + n_states + 1 + 2 * m + k * v
    rng = rng or np.random.default_rng(0)
    leader = MappoNet("leader", leader_in, head_widths=[i_train + 1] * m,
                      hidden=hidden, rng=rng, mode=mode, adapter=adapter)
    follower = MappoNet("follower", follower_in,
                        head_widths=[2] * m + [v] * k,
                        hidden=hidden, rng=rng, mode=mode, adapter=adapter)
    return leader, follower


class MappoRunner:
    """Rollout adapter: maps env observations onto the fixed-width nets."""

    def __init__(self, env_config, leader_net, follower_net, i_train):
        self.cfg = env_config
        self.leader_net = leader_net
        self.follower_net = follower_net
        self.i_train = i_train

    def leader_vec(self, obs):
        return leader_obs_vector(obs, len(obs.csi) if self.leader_net.adapter
                                 else self.i_train, self.cfg.n_channel_states,
                                 self.cfg.num_rbgs, self.cfg.ucm_len,
                                 self.cfg.ucm_vocab_size)

    def follower_vec(self, obs, ue_index, num_ues):
        return follower_obs_vector(obs, ue_index,
                                   num_ues if self.follower_net.adapter
                                   else self.i_train,
                                   self.cfg.n_channel_states, self.cfg.num_rbgs,
                                   self.cfg.ucm_len, self.cfg.ucm_vocab_size,
                                   self.cfg.dpdu_bits)

    def leader_act(self, obs, rng, temperature=1.0, greedy=False):
        vec = self.leader_vec(obs)
        choices, lp, value = self.leader_net.act(vec, rng, temperature, greedy)
        return tuple(choices), lp, value, vec

    def follower_act(self, obs, ue_index, num_ues, rng, temperature=1.0,
                     greedy=False):
        vec = self.follower_vec(obs, ue_index, num_ues)
        choices, lp, value = self.follower_net.act(vec, rng, temperature, greedy)
        m = self.cfg.num_rbgs
        bitmap = tuple(choices[:m])
        ucm = tuple(choices[m:])
        return (bitmap, ucm), lp, value, vec


class DictatorPolicy:
    """Ablation: followers copy the leader's intent bits verbatim, no policy."""

    def __init__(self, ucm_len):
        self.ucm_len = ucm_len

    def act(self, dcm_bits):
        return tuple(dcm_bits), (0,) * self.ucm_len


# ---------------------------------------------------------------------------
# MAPPO-S training: same PPO arithmetic, MLP backbone.
# ---------------------------------------------------------------------------

def _mappo_old_dists(net, transitions):
    vecs = np.stack([tr.prompt for tr in transitions])
    logits, _, _ = net.forward(vecs)
    return logits


def _mappo_head_logps(net, logits, temps):
    """Per-head masked log-prob tables, list over heads of [B, W]."""
    out = []
    for i in range(len(net.head_widths)):
        z = logits[:, net._offsets[i]:net._offsets[i + 1]] / temps[:, None]
        z = z - z.max(axis=1, keepdims=True)
        out.append(z - np.log(np.exp(z).sum(axis=1, keepdims=True)))
    return out


def _mappo_update(net, buffer, opt_pi, opt_v, config, actor_rate, rng):
    transitions = buffer.flat()
    n = len(transitions)
    old_logits = _mappo_old_dists(net, transitions)
    temps_all = np.array([tr.temperature for tr in transitions])
    stats = {}
    for _ in range(config.ppo_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            sel = order[start:start + config.minibatch_size]
            batch = [transitions[i] for i in sel]
            vecs = np.stack([tr.prompt for tr in batch])
            toks = np.stack([tr.action for tr in batch])
            temps = temps_all[sel]
            adv = np.array([tr.advantage for tr in batch])
            if config.advantage_norm:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            logits, values, cache = net.forward(vecs, need_cache=True)
            new_lps = _mappo_head_logps(net, logits, temps)
            old_lps = _mappo_head_logps(net, old_logits[sel], temps)
            rows = np.arange(len(batch))
            new_total = sum(lp[rows, toks[:, i]] for i, lp in enumerate(new_lps))
            old_total = np.array([tr.logprob for tr in batch])
            kl = sum((np.exp(o) * (o - nw)).sum(axis=1)
                     for o, nw in zip(old_lps, new_lps))
            ent = sum(-(np.exp(nw) * nw).sum(axis=1) for nw in new_lps)
            objective, ratio, active = clipped_surrogate_objective(
                new_total, old_total, adv, kl, ent, config)

            coef = (active * ratio * adv)[:, None]
            dlogits = np.zeros_like(logits)
            for i, nw in enumerate(new_lps):
                p_new = np.exp(nw)
                p_old = np.exp(old_lps[i])
                onehot = np.zeros_like(p_new)
                onehot[rows, toks[:, i]] = 1.0
                ent_i = -(p_new * nw).sum(axis=1, keepdims=True)
                d = (coef * (onehot - p_new)
                     - config.kl_coeff * (p_new - p_old)
                     + config.entropy_coeff * (-p_new * (nw + ent_i)))
                dlogits[:, net._offsets[i]:net._offsets[i + 1]] = \
                    d / temps[:, None] / len(batch)
            agrads = net.backward(cache, dlogits, np.zeros(len(batch)))
            agrads = {k: v for k, v in agrads.items() if not k.startswith("v")}
            opt_pi.step(net.params, agrads, actor_rate, direction="ascend")

            targets = np.array([tr.reward_to_go for tr in batch])
            dvals = 2.0 * (values - targets) / len(batch)
            vgrads = net.backward(cache, np.zeros_like(logits), dvals)
            vgrads = {k: v for k, v in vgrads.items() if k.startswith("v")}
            opt_v.step(net.params, vgrads, config.critic_rate, direction="descend")
            stats = {"pi_objective": objective,
                     "v_loss": float(((values - targets) ** 2).mean())}
    buffer.clear()
    return stats


def train_mappo(run_config, i_train, seed, max_epochs=None):
    """Retrain the fixed-width nets at one scenario size (the S mode)."""
    env_cfg, weights, tc = run_config.env, run_config.game, run_config.train
    e_max = max_epochs or tc.max_epochs
    ss = np.random.SeedSequence(seed).spawn(4)
    rng_net = np.random.default_rng(ss[0])
    rng_sample = np.random.default_rng(ss[1])
    rng_update = np.random.default_rng(ss[2])
    rng_episode = np.random.default_rng(ss[3])
    leader_net, follower_net = build_mappo(env_cfg, i_train, rng=rng_net)
    runner = MappoRunner(env_cfg, leader_net, follower_net, i_train)
    buffers = {"leader": TrajectoryBuffer(), "follower": TrajectoryBuffer()}
    opts = {"leader": (Adam(), Adam()), "follower": (Adam(), Adam())}
    scales = reward_scales(run_config)
    logs = []
    for epoch in range(e_max):
        temp = tc.temp_start + (epoch / e_max) * (tc.temp_end - tc.temp_start)
        env_seed = int(rng_episode.integers(2 ** 31 - 1))
        env = UdtsEnv(env_cfg, weights, i_train, env_seed)
        lead_traj, foll_traj = collect_mappo_episode(env, runner, temp,
                                                     rng_sample, scales)
        finalize_episode(lead_traj, weights.gamma, weights.lam)
        buffers["leader"].add_episode(lead_traj)
        for traj in foll_traj:
            finalize_episode(traj, weights.gamma, weights.lam)
        buffers["follower"].add_episode([t for traj in foll_traj for t in traj])
        rec = {"epoch": epoch,
               "leader_utility": float(np.mean([t.raw_reward for t in lead_traj]))}
        if len(buffers["leader"]) >= tc.buffer_episodes:
            ls = _mappo_update(leader_net, buffers["leader"], *opts["leader"],
                               tc, tc.actor_rate, rng_update)
            fs = _mappo_update(follower_net, buffers["follower"], *opts["follower"],
                               tc, tc.actor_rate * tc.iota_u, rng_update)
            rec.update({"leader_losses": ls, "follower_losses": fs})
        logs.append(rec)
    return leader_net, follower_net, logs


def collect_mappo_episode(env, runner, temperature, rng, scales=(1.0, 1.0)):
    leader_scale, follower_scale = scales
    i_t = env.num_ues
    lead_traj = []
    foll_traj = [[] for _ in range(i_t)]
    lobs = env.leader_observation()
    for _ in range(env.config.episode_len):
        dcm_map, lp_b, v_b, lvec = runner.leader_act(lobs, rng, temperature)
        dcm_bits = [game.dcm_bits_for_ue(dcm_map, i + 1, i_t) for i in range(i_t)]
        ue_actions, fmeta = [], []
        for i in range(i_t):
            obs = env.follower_observation(i, dcm_bits[i])
            (bitmap, ucm), lp_u, v_u, fvec = runner.follower_act(
                obs, i, i_t, rng, temperature)
            ue_actions.append((bitmap, ucm))
            fmeta.append((lp_u, v_u, fvec, bitmap + ucm))
        res = env.step(dcm_map, ue_actions)
        lead_traj.append(Transition(
            prompt=lvec, action=np.asarray(dcm_map, dtype=np.int64),
            reward=res.leader_reward / leader_scale, raw_reward=res.leader_reward,
            value=v_b, logprob=lp_b, num_active_ues=i_t, temperature=temperature))
        for i, (lp_u, v_u, fvec, toks) in enumerate(fmeta):
            foll_traj[i].append(Transition(
                prompt=fvec, action=np.asarray(toks, dtype=np.int64),
                reward=res.follower_rewards[i] / follower_scale,
                raw_reward=res.follower_rewards[i],
                value=v_u, logprob=lp_u, num_active_ues=i_t,
                temperature=temperature))
        lobs = res.leader_obs
    return lead_traj, foll_traj
