"""Leader-first PPO training loop.

Per slot the leader emits its RBG map first, every follower then reacts to
the fresh intent bits, and the environment resolves the joint action.
Leader and follower experiences land in separate buffers and the two
bundles update independently: clipped surrogate with KL penalty and
entropy bonus for the actor (ascent, follower rate scaled by iota_u),
squared TD-residual regression for the value head (descent).

Gradients of both losses are assembled analytically as dlogits/dvalues and
pushed through the model's explicit backward pass.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import game
from .env import UdtsEnv
from .errors import ContractError, TrainingDiverged

TRAINLOG_SCHEMA = "stackelmac.trainlog/1"


# ---------------------------------------------------------------------------
# Advantage machinery
# ---------------------------------------------------------------------------

def rewards_to_go(rewards, gamma, bootstrap=0.0):
    """Discounted suffix sums R_t = sum_{t'>=t} gamma^(t'-t) r_t' (+ tail value)."""
    out = np.zeros(len(rewards))
    acc = bootstrap
    for t in reversed(range(len(rewards))):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def gae(rewards, values, gamma, lam):
    """Exponentially weighted TD-residual advantages.

    values must hold one bootstrap entry more than rewards (terminal 0 for
    finite episodes).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != rewards.shape[0] + 1:
        raise ContractError(f"need len(values) == len(rewards)+1, got "
                            f"{values.shape[0]} vs {rewards.shape[0]}")
    deltas = rewards + gamma * values[1:] - values[:-1]
    out = np.zeros_like(rewards)
    acc = 0.0
    for t in reversed(range(len(rewards))):
        acc = deltas[t] + gamma * lam * acc
        out[t] = acc
    return out


def temperature_at(epoch, config):
    """Linear decay from temp_start (epoch 0) to temp_end (epoch max_epochs)."""
    if not 0 <= epoch <= config.max_epochs:
        raise ContractError(f"epoch {epoch} outside 0..{config.max_epochs}")
    frac = epoch / config.max_epochs
    return config.temp_start + frac * (config.temp_end - config.temp_start)


# ---------------------------------------------------------------------------
# Experience containers
# ---------------------------------------------------------------------------

@dataclass
class Transition:
    prompt: np.ndarray
    action: object              # ActionSeq
    reward: float               # scaled, used for learning
    raw_reward: float
    value: float
    logprob: float              # behavior-policy total log-prob
    num_active_ues: int
    temperature: float
    advantage: float = None     # filled after episode completion
    reward_to_go: float = None


@dataclass
class TrajectoryBuffer:
    episodes: list = field(default_factory=list)
    consumed: int = 0           # episodes dropped by past clears

    def add_episode(self, transitions):
        self.episodes.append(transitions)

    def __len__(self):
        return len(self.episodes)

    def flat(self):
        return [tr for ep in self.episodes for tr in ep]

    def clear(self):
        self.consumed += len(self.episodes)
        self.episodes.clear()


def finalize_episode(transitions, gamma, lam):
    """Fill advantages and rewards-to-go (terminal bootstrap 0)."""
    rewards = [tr.reward for tr in transitions]
    values = [tr.value for tr in transitions] + [0.0]
    adv = gae(rewards, values, gamma, lam)
    rtg = rewards_to_go(rewards, gamma, bootstrap=0.0)
    for tr, a, r in zip(transitions, adv, rtg):
        tr.advantage = float(a)
        tr.reward_to_go = float(r)


# ---------------------------------------------------------------------------
# Batched scoring: pad, forward once, read action-position distributions.
# ---------------------------------------------------------------------------

def _pad_batch(policy, transitions):
    n_act = policy.action_len()
    prompt_lens = np.array([tr.prompt.shape[0] for tr in transitions], dtype=np.int64)
    lmax = int(prompt_lens.max()) + n_act
    b = len(transitions)
    seqs = np.full((b, lmax), policy.vocab.NULL, dtype=np.int64)
    for r, tr in enumerate(transitions):
        n0 = tr.prompt.shape[0]
        seqs[r, :n0] = tr.prompt
        seqs[r, n0:n0 + n_act] = tr.action.tokens
    return seqs, prompt_lens


def _mask_tensor(policy, transitions):
    """Boolean [B, P, V] admissibility from each transition's PAG mask."""
    n_act = policy.action_len()
    vsize = policy.vocab.size
    out = np.zeros((len(transitions), n_act, vsize), dtype=bool)
    for r, tr in enumerate(transitions):
        for j, ids in enumerate(policy.masks(tr.num_active_ues)):
            out[r, j, ids] = True
    return out


def _masked_dists(logits, transitions, prompt_lens, n_act, masks):
    """Masked per-position log-probs/probs at the action slots of a batch."""
    b = len(transitions)
    temps = np.array([tr.temperature for tr in transitions])[:, None, None]
    rows = np.arange(b)[:, None]
    pos = prompt_lens[:, None] - 1 + np.arange(n_act)[None, :]
    z = logits[rows, pos, :] / temps                     # [B, P, V]
    z = np.where(masks, z, -np.inf)
    z = z - z.max(axis=2, keepdims=True)
    expz = np.exp(z)
    logp = z - np.log(expz.sum(axis=2, keepdims=True))
    probs = np.where(masks, np.exp(logp), 0.0)
    return logp, probs, (rows, pos, temps)


def _gather_action_logp(logp, transitions):
    b, n_act, _ = logp.shape
    toks = np.stack([tr.action.tokens for tr in transitions])
    return logp[np.arange(b)[:, None], np.arange(n_act)[None, :], toks], toks


# ---------------------------------------------------------------------------
# Losses (value + analytic gradient wrt logits/values)
# ---------------------------------------------------------------------------

def clipped_surrogate_objective(new_total, old_total, advantages, kl, ent, config):
    """Scalar PPO objective from per-sample logprobs and regularizer terms.

    Shared by the token policies and the MAPPO baseline so both optimize
    literally the same arithmetic.  Returns (objective, ratio, active) where
    ``active`` marks samples whose gradient flows through the unclipped branch.
    """
    ratio = np.exp(np.asarray(new_total) - np.asarray(old_total))
    lo, hi = 1.0 - config.clip_eps, 1.0 + config.clip_eps
    u1 = ratio * advantages
    u2 = np.clip(ratio, lo, hi) * advantages
    surrogate = np.minimum(u1, u2)
    objective = float(surrogate.mean() - config.kl_coeff * np.mean(kl)
                      + config.entropy_coeff * np.mean(ent))
    return objective, ratio, (u1 <= u2).astype(np.float64)


def _ppo_terms(policy, transitions, logits, prompt_lens, masks, old_probs,
               config, advantages, seq_shape):
    """Objective value, stats, and d(objective)/d(logits) for one batch."""
    n_act = policy.action_len()
    logp, probs, (rows, pos, temps) = _masked_dists(logits, transitions,
                                                    prompt_lens, n_act, masks)
    logp_tok, toks = _gather_action_logp(logp, transitions)
    new_total = logp_tok.sum(axis=1)
    old_total = np.array([tr.logprob for tr in transitions])

    safe_logp = np.where(masks, logp, 0.0)
    with np.errstate(invalid="ignore"):
        old_logp = np.where(old_probs > 0, np.log(np.where(old_probs > 0,
                                                           old_probs, 1.0)), 0.0)
    kl_pos = (old_probs * (old_logp - safe_logp)).sum(axis=2)     # [B, P]
    ent_pos = -(probs * safe_logp).sum(axis=2)                    # [B, P]
    kl = kl_pos.sum(axis=1)
    ent = ent_pos.sum(axis=1)

    objective, ratio, active = clipped_surrogate_objective(
        new_total, old_total, advantages, kl, ent, config)
    stats = {"ratio_mean": float(ratio.mean()), "kl": float(kl.mean()),
             "entropy": float(ent.mean())}

    b, n_act, vsize = probs.shape
    # surrogate flows through the unclipped branch only when it is the min
    coef = (active * ratio * advantages)[:, None, None]           # d/d logp_tok
    onehot = np.zeros((b, n_act, vsize))
    onehot[np.arange(b)[:, None], np.arange(n_act)[None, :], toks] = 1.0
    d_surr = coef * (onehot - probs)
    d_kl = probs - old_probs
    d_ent = -probs * (safe_logp + ent_pos[:, :, None])
    dz = (d_surr - config.kl_coeff * d_kl + config.entropy_coeff * d_ent) / b
    dpos = np.where(masks, dz / temps, 0.0)
    dlogits = np.zeros(seq_shape + (vsize,))
    np.add.at(dlogits, (rows, pos), dpos)
    return objective, stats, dlogits


def ppo_objective(policy, params, transitions, old_probs, config,
                  with_grad=False, advantages=None):
    """Clipped surrogate - kl_coeff*KL(old||new) + ent_coeff*H(new).

    old_probs: [B, P, V] behavior-policy distributions (prob 0 off-mask).
    Returns (objective, stats) or (objective, stats, grads) with grads over
    actor parameters assembled through the model backward.
    """
    if advantages is None:
        advantages = np.array([tr.advantage for tr in transitions])
    masks = _mask_tensor(policy, transitions)
    seqs, prompt_lens = _pad_batch(policy, transitions)
    logits, _, cache = policy.model.forward(params, seqs, lengths=prompt_lens,
                                            need_cache=with_grad)
    objective, stats, dlogits = _ppo_terms(policy, transitions, logits,
                                           prompt_lens, masks, old_probs,
                                           config, advantages, seqs.shape)
    if not with_grad:
        return objective, stats
    grads = policy.model.backward(params, cache, dlogits,
                                  np.zeros(seqs.shape[0]))
    grads = {k: v for k, v in grads.items()
             if not policy.model.is_critic_param(k)}
    return objective, stats, grads


def critic_loss(policy, params, transitions, with_grad=False):
    """Mean squared error between prompt values and rewards-to-go.

    Gradients are reported for the value head (the critic's own parameters).
    """
    seqs, prompt_lens = _pad_batch(policy, transitions)
    logits, values, cache = policy.model.forward(params, seqs, lengths=prompt_lens,
                                                 need_cache=with_grad)
    targets = np.array([tr.reward_to_go for tr in transitions])
    err = values - targets
    loss = float((err ** 2).mean())
    if not with_grad:
        return loss
    dvalues = 2.0 * err / err.shape[0]
    grads = policy.model.backward_value_head(params, cache, dvalues)
    return loss, grads


def sgd_step(params, grads, rate, direction="ascend"):
    """Plain gradient step returning a new parameter dict."""
    if direction not in ("ascend", "descend"):
        raise ContractError(f"direction must be ascend/descend, got {direction!r}")
    sign = 1.0 if direction == "ascend" else -1.0
    return {k: (v + sign * rate * grads[k] if k in grads else v.copy())
            for k, v in params.items()}


class Adam:
    """Adaptive-moment steps over a parameter dict (in-place)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads, rate, direction="ascend"):
        sign = 1.0 if direction == "ascend" else -1.0
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            params[k] += sign * rate * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# Rollout
# ---------------------------------------------------------------------------

def collect_episode(env, leader, follower, temperature, rng, scales=(1.0, 1.0)):
    """Run one episode; returns (leader transitions, per-UE transition lists).

    Follower observations at slot t carry the DCM issued at t (the leader
    acts first within the slot).
    """
    leader_scale, follower_scale = scales
    i_t = env.num_ues
    lead_traj = []
    foll_traj = [[] for _ in range(i_t)]
    kpi = {"rec": 0, "tx": 0, "collided_rbgs": 0, "occupied_rbgs": 0,
           "consistency": []}
    lobs = env.leader_observation()
    for _ in range(env.config.episode_len):
        lprompt = leader.serialize(lobs)
        dcm_act, v_b = leader.generate(lprompt, i_t, temperature, rng)
        dcm_map = leader.decode(dcm_act.tokens)
        dcm_bits = [game.dcm_bits_for_ue(dcm_map, i + 1, i_t) for i in range(i_t)]
        fprompts = np.stack([follower.serialize(env.follower_observation(i, dcm_bits[i]))
                             for i in range(i_t)])
        facts, v_us = follower.generate_batch(fprompts, i_t, temperature, rng)
        ue_actions = [follower.decode(a.tokens) for a in facts]
        res = env.step(dcm_map, ue_actions)
        kpi["rec"] += sum(res.xi_rec)
        kpi["tx"] += sum(res.xi_tx)
        kpi["collided_rbgs"] += sum(1 for c in res.collision_map if c >= 2)
        kpi["occupied_rbgs"] += sum(1 for c in res.collision_map if c >= 1)
        kpi["consistency"].extend(res.consistencies)

        lead_traj.append(Transition(
            prompt=lprompt, action=dcm_act,
            reward=res.leader_reward / leader_scale, raw_reward=res.leader_reward,
            value=float(v_b), logprob=dcm_act.total_logprob,
            num_active_ues=i_t, temperature=temperature))
        for i in range(i_t):
            foll_traj[i].append(Transition(
                prompt=fprompts[i], action=facts[i],
                reward=res.follower_rewards[i] / follower_scale,
                raw_reward=res.follower_rewards[i],
                value=float(v_us[i]), logprob=facts[i].total_logprob,
                num_active_ues=i_t, temperature=temperature))
        lobs = res.leader_obs
    kpi["mean_consistency"] = float(np.mean(kpi.pop("consistency") or [0.0]))
    return lead_traj, foll_traj, kpi


# ---------------------------------------------------------------------------
# Training driver
# ---------------------------------------------------------------------------

def reward_scales(run_config):
    cfg, w = run_config.env, run_config.game
    tc = run_config.train
    leader = tc.reward_scale_leader
    if leader <= 0:
        max_cap = max(cfg.rbg_capacity_dpdus(nu) for nu in cfg.spectral_eff)
        leader = cfg.num_rbgs * max(max_cap, 1) + w.epsilon
    follower = tc.reward_scale_follower
    if follower <= 0:
        follower = max(w.rho1 + w.rho2, 1.0)
    return leader, follower


def _old_distributions(policy, transitions):
    masks = _mask_tensor(policy, transitions)
    seqs, prompt_lens = _pad_batch(policy, transitions)
    logits, _, _ = policy.model.forward(policy.params, seqs, lengths=prompt_lens)
    _, probs, _ = _masked_dists(logits, transitions, prompt_lens,
                                policy.action_len(), masks)
    return probs


def _update_bundle(policy, buffer, optimizer_pi, optimizer_v, config, lr_scale,
                   actor_rate, rng):
    """One PPO round (ppo_epochs x minibatches) over a full buffer."""
    transitions = buffer.flat()
    old_probs = _old_distributions(policy, transitions)
    n = len(transitions)
    last = {"pi_objective": 0.0, "v_loss": 0.0, "kl": 0.0, "entropy": 0.0}
    for _ in range(config.ppo_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            sel = order[start:start + config.minibatch_size]
            batch = [transitions[i] for i in sel]
            adv = np.array([tr.advantage for tr in batch])
            if config.advantage_norm:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            # one forward serves both losses; critic grads stay in the head
            masks = _mask_tensor(policy, batch)
            seqs, prompt_lens = _pad_batch(policy, batch)
            logits, values, cache = policy.model.forward(
                policy.params, seqs, lengths=prompt_lens, need_cache=True)
            obj, stats, dlogits = _ppo_terms(policy, batch, logits, prompt_lens,
                                             masks, old_probs[sel], config, adv,
                                             seqs.shape)
            targets = np.array([tr.reward_to_go for tr in batch])
            err = values - targets
            vloss = float((err ** 2).mean())
            if not (math.isfinite(obj) and math.isfinite(vloss)):
                raise TrainingDiverged(f"non-finite loss: objective={obj}, "
                                       f"critic={vloss}")
            agrads = policy.model.backward(policy.params, cache, dlogits,
                                           np.zeros(len(batch)))
            agrads = {k: v for k, v in agrads.items()
                      if not policy.model.is_critic_param(k)}
            vgrads = policy.model.backward_value_head(
                policy.params, cache, 2.0 * err / err.shape[0])
            optimizer_pi.step(policy.params, agrads, actor_rate * lr_scale,
                              direction="ascend")
            optimizer_v.step(policy.params, vgrads, config.critic_rate * lr_scale,
                             direction="descend")
            last = {"pi_objective": obj, "v_loss": vloss,
                    "kl": stats["kl"], "entropy": stats["entropy"]}
    buffer.clear()
    return last


def train(run_config, seed, log_hook=None, checkpoint_hook=None, max_epochs=None):
    """Algorithm-1 training; returns (leader_policy, follower_policy, log records)."""
    from .policy import TokenPolicy  # local import to avoid cycles

    env_cfg, weights = run_config.env, run_config.game
    tc = run_config.train
    e_max = max_epochs or tc.max_epochs
    ss = np.random.SeedSequence(seed).spawn(5)
    rng_init_l = np.random.default_rng(ss[0])
    rng_init_f = np.random.default_rng(ss[1])
    rng_sample = np.random.default_rng(ss[2])
    rng_update = np.random.default_rng(ss[3])
    rng_episode = np.random.default_rng(ss[4])

    leader = TokenPolicy("leader", run_config.policy, env_cfg, rng=rng_init_l)
    follower = TokenPolicy("follower", run_config.policy, env_cfg, rng=rng_init_f)
    buffers = {"leader": TrajectoryBuffer(), "follower": TrajectoryBuffer()}
    opts = {
        "leader": (Adam(), Adam()) if tc.optimizer == "adam" else (_SgdOpt(), _SgdOpt()),
        "follower": (Adam(), Adam()) if tc.optimizer == "adam" else (_SgdOpt(), _SgdOpt()),
    }
    scales = reward_scales(run_config)
    logs = []
    for epoch in range(e_max):
        # linear decay over the epochs this run will actually execute
        temp = tc.temp_start + (epoch / e_max) * (tc.temp_end - tc.temp_start)
        i_t = int(rng_episode.choice(env_cfg.num_ues_range))
        env_seed = int(rng_episode.integers(2 ** 31 - 1))
        env = UdtsEnv(env_cfg, weights, i_t, env_seed)
        lead_traj, foll_traj, kpi = collect_episode(env, leader, follower, temp,
                                                    rng_sample, scales)
        finalize_episode(lead_traj, weights.gamma, weights.lam)
        buffers["leader"].add_episode(lead_traj)
        for traj in foll_traj:
            finalize_episode(traj, weights.gamma, weights.lam)
        buffers["follower"].add_episode([tr for traj in foll_traj for tr in traj])

        t_len = env_cfg.episode_len
        record = {
            "epoch": epoch, "i_t": i_t, "temperature": round(temp, 6),
            "leader_utility": float(np.mean([tr.raw_reward for tr in lead_traj])),
            "follower_utility": float(np.mean(
                [tr.raw_reward for traj in foll_traj for tr in traj])),
            "jfi_final": game.jfi(env.bs.cum_rbg_usage),
            "throughput_dpdus_per_ue_tti": kpi["rec"] / (i_t * t_len),
            "collision_rate": (kpi["collided_rbgs"] / kpi["occupied_rbgs"]
                               if kpi["occupied_rbgs"] else 0.0),
            "mean_consistency": kpi["mean_consistency"],
            "updated": False,
        }

        if len(buffers["leader"]) >= tc.buffer_episodes:
            lr_scale = 1.0
            if tc.cosine_decay and tc.optimizer == "adam":
                lr_scale = 0.5 * (1.0 + math.cos(math.pi * epoch / e_max))
            try:
                lstats = _update_bundle(leader, buffers["leader"], *opts["leader"],
                                        tc, lr_scale, tc.actor_rate, rng_update)
                fstats = _update_bundle(follower, buffers["follower"],
                                        *opts["follower"], tc, lr_scale,
                                        tc.actor_rate * tc.iota_u, rng_update)
            except TrainingDiverged as exc:
                record["aborted"] = str(exc)
                logs.append(record)
                if log_hook:
                    log_hook(record)
                raise
            record.update({"updated": True, "lr_scale": round(lr_scale, 6),
                           "leader_losses": lstats, "follower_losses": fstats})

        logs.append(record)
        if log_hook:
            log_hook(record)
        if checkpoint_hook and tc.checkpoint_every and \
                (epoch + 1) % tc.checkpoint_every == 0:
            checkpoint_hook(leader, follower, epoch)
    return leader, follower, logs


class _SgdOpt:
    def step(self, params, grads, rate, direction="ascend"):
        sign = 1.0 if direction == "ascend" else -1.0
        for k, g in grads.items():
            params[k] += sign * rate * g
