"""Token policies: grammar-masked autoregressive generation and scoring.

One TokenPolicy wraps one parameter bundle (role, architecture, vocab).
All followers share a single bundle; the leader owns another.  Sampling
restricts logits to the positional PAG mask, divides by temperature, and
normalizes; per-token log-probs under that masked distribution are cached
so rescoring is exactly consistent.  No KV cache: each generated token
re-runs the forward over the grown sequence.
"""

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tokens as tok
from .config import EnvConfig, PolicyConfig
from .errors import CheckpointError, ContractError
from .model import SeqModel

CKPT_SCHEMA = "stackelmac.ckpt/1"


@dataclass
class ActionSeq:
    """A PAG-constrained action: tokens plus behavior-policy log-probs."""

    tokens: np.ndarray
    logprobs: np.ndarray
    total_logprob: float
    role: str


def masked_logprobs(logits_row, mask_ids, temperature=1.0):
    """Log-probs over the admissible ids of one position (stable log-softmax)."""
    z = logits_row[mask_ids] / temperature
    z = z - z.max()
    lse = np.log(np.exp(z).sum())
    return z - lse


class TokenPolicy:
    """Role-specific policy over the shared structured-token vocabulary."""

    def __init__(self, role, policy_config, env_config, params=None, rng=None):
        if role not in ("leader", "follower"):
            raise ContractError(f"unknown role {role!r}")
        self.role = role
        self.policy_config = policy_config
        self.env_config = env_config
        self.vocab = tok.build_vocab(env_config, policy_config)
        self.num_rbgs = env_config.num_rbgs
        self.ucm_len = env_config.ucm_len
        self.model = SeqModel(policy_config, self.vocab.size)
        if params is None:
            if rng is None:
                raise ContractError("need params or an rng to initialize them")
            params = self.model.init_params(rng)
        self.params = params

    # -- observation plumbing ------------------------------------------------

    def serialize(self, obs):
        if self.role == "leader":
            return tok.serialize_leader_obs(obs, self.vocab, self.num_rbgs, self.ucm_len)
        return tok.serialize_follower_obs(obs, self.vocab, self.num_rbgs,
                                          self.ucm_len, self.env_config.dpdu_bits)

    def masks(self, num_active_ues):
        return tok.pag_mask(self.role, num_active_ues, self.vocab,
                            self.num_rbgs, self.ucm_len)

    def action_len(self):
        return self.num_rbgs if self.role == "leader" else self.num_rbgs + self.ucm_len

    def decode(self, action_tokens):
        if self.role == "leader":
            return tok.decode_leader_action(action_tokens, self.vocab)
        return tok.decode_follower_action(action_tokens, self.vocab,
                                          self.num_rbgs, self.ucm_len)

    # -- generation ----------------------------------------------------------

    def generate(self, prompt, num_active_ues, temperature, rng):
        """Sample one action; returns (ActionSeq, value estimate of the prompt)."""
        acts, values = self.generate_batch(np.asarray(prompt, dtype=np.int64)[None, :],
                                           num_active_ues, temperature, rng)
        return acts[0], values[0]

    def generate_batch(self, prompts, num_active_ues, temperature, rng):
        """Sample one action per row of equal-length prompts [B, L0]."""
        if temperature <= 0:
            raise ContractError(f"temperature must be > 0, got {temperature}")
        masks = self.masks(num_active_ues)
        seqs = np.asarray(prompts, dtype=np.int64)
        B = seqs.shape[0]
        values = None
        chosen = np.zeros((B, len(masks)), dtype=np.int64)
        logps = np.zeros((B, len(masks)))
        for pos, mask_ids in enumerate(masks):
            logits, vals, _ = self.model.forward(self.params, seqs)
            if values is None:
                values = vals          # value of the bare prompt
            last = logits[:, -1, :]
            z = last[:, mask_ids] / temperature
            z = z - z.max(axis=1, keepdims=True)
            lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            probs = np.exp(lp)
            u = rng.random(B)
            idx = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
            idx = np.minimum(idx, len(mask_ids) - 1)
            chosen[:, pos] = mask_ids[idx]
            logps[:, pos] = lp[np.arange(B), idx]
            seqs = np.concatenate([seqs, chosen[:, pos][:, None]], axis=1)
        acts = [ActionSeq(tokens=chosen[b].copy(), logprobs=logps[b].copy(),
                          total_logprob=float(logps[b].sum()), role=self.role)
                for b in range(B)]
        return acts, values

    def greedy(self, prompt, num_active_ues):
        """Argmax decoding over raw masked logits; ties go to the lowest id."""
        masks = self.masks(num_active_ues)
        seq = np.asarray(prompt, dtype=np.int64)
        chosen = []
        for mask_ids in masks:
            logits, _, _ = self.model.forward(self.params, seq[None, :])
            row = logits[0, -1, mask_ids]
            best = mask_ids[int(np.argmax(row))]   # first max = lowest id on ties
            chosen.append(int(best))
            seq = np.concatenate([seq, [best]])
        chosen = np.asarray(chosen, dtype=np.int64)
        lp = self.action_logprob(prompt, chosen, num_active_ues)
        return ActionSeq(tokens=chosen, logprobs=lp[1], total_logprob=lp[0],
                         role=self.role)

    # -- scoring -------------------------------------------------------------

    def action_logprob(self, prompt, action_tokens, num_active_ues,
                       temperature=1.0):
        """(total, per-token) masked log-probs of an action given its prompt."""
        masks = self.masks(num_active_ues)
        action_tokens = np.asarray(action_tokens, dtype=np.int64)
        if action_tokens.shape[0] != len(masks):
            raise ContractError(f"action must have {len(masks)} tokens, "
                                f"got {action_tokens.shape[0]}")
        prompt = np.asarray(prompt, dtype=np.int64)
        seq = np.concatenate([prompt, action_tokens])
        logits, _, _ = self.model.forward(self.params, seq[None, :])
        n0 = prompt.shape[0]
        per = np.zeros(len(masks))
        for j, mask_ids in enumerate(masks):
            hits = np.nonzero(mask_ids == action_tokens[j])[0]
            if hits.size == 0:
                raise ContractError(f"action token {action_tokens[j]} at position {j} "
                                    "is outside its PAG mask")
            lp = masked_logprobs(logits[0, n0 - 1 + j, :], mask_ids, temperature)
            per[j] = lp[hits[0]]
        return float(per.sum()), per

    def enumerate_actions(self, num_active_ues):
        """All grammar-valid action sequences (small M and vocab only)."""
        masks = self.masks(num_active_ues)
        total = 1
        for m in masks:
            total *= len(m)
            if total > 200_000:
                raise ContractError("action space too large to enumerate")
        return [np.asarray(c, dtype=np.int64) for c in itertools.product(*masks)]

    def score_actions(self, prompt, candidates, num_active_ues, temperature=1.0):
        """Total masked log-prob of each candidate action (one batched forward)."""
        masks = self.masks(num_active_ues)
        prompt = np.asarray(prompt, dtype=np.int64)
        n0 = prompt.shape[0]
        cands = np.stack([np.asarray(c, dtype=np.int64) for c in candidates])
        seqs = np.concatenate([np.tile(prompt, (cands.shape[0], 1)), cands], axis=1)
        logits, _, _ = self.model.forward(self.params, seqs)
        totals = np.zeros(cands.shape[0])
        for j, mask_ids in enumerate(masks):
            rows = logits[:, n0 - 1 + j, :][:, mask_ids] / temperature
            rows = rows - rows.max(axis=1, keepdims=True)
            lp = rows - np.log(np.exp(rows).sum(axis=1, keepdims=True))
            pos = np.searchsorted(mask_ids, cands[:, j])   # mask ids are sorted
            if np.any(pos >= len(mask_ids)) or np.any(mask_ids[np.minimum(
                    pos, len(mask_ids) - 1)] != cands[:, j]):
                raise ContractError(f"candidate token outside mask at position {j}")
            totals += lp[np.arange(cands.shape[0]), pos]
        return totals

    def action_logprob_exact(self, prompt, action_tokens, num_active_ues,
                             temperature=1.0):
        """Sequence probability renormalized over the enumerated action space.

        Verification mode of the global-softmax formulation; equals the
        per-token product whenever per-position distributions are already
        normalized (checked by tests via enumeration).
        """
        space = self.enumerate_actions(num_active_ues)
        action_tokens = np.asarray(action_tokens, dtype=np.int64)
        scores = self.score_actions(prompt, space, num_active_ues, temperature)
        hit = None
        for idx, cand in enumerate(space):
            if np.array_equal(cand, action_tokens):
                hit = idx
                break
        if hit is None:
            raise ContractError("action is not in the enumerated space")
        scores = scores - scores.max()
        return float(scores[hit] - np.log(np.exp(scores).sum()))

    def value(self, prompt):
        """Scalar state-value estimate from the value head at the prompt end."""
        _, values, _ = self.model.forward(self.params,
                                          np.asarray(prompt, dtype=np.int64)[None, :])
        return float(values[0])

    # -- checkpointing -------------------------------------------------------

    def meta(self, config_hash="", compat_hash="", epoch=0):
        return {"schema": CKPT_SCHEMA, "role": self.role,
                "policy_config": asdict(self.policy_config),
                "env_config": _env_config_dict(self.env_config),
                "config_hash": config_hash, "compat_hash": compat_hash,
                "epoch": epoch}

    def compat_hash(self):
        return compat_hash(self.policy_config, self.env_config)


def compat_hash(policy_config, env_config):
    """Hash of everything that shapes the vocabulary and prompt schema."""
    import hashlib
    blob = json.dumps({
        "policy": asdict(policy_config),
        "num_rbgs": env_config.num_rbgs,
        "ucm_len": env_config.ucm_len,
        "ucm_vocab_size": env_config.ucm_vocab_size,
        "n_channel_states": env_config.n_channel_states,
        "dpdu_bits": env_config.dpdu_bits,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _env_config_dict(env_config):
    import math
    from dataclasses import asdict as dc_asdict
    d = dc_asdict(env_config)
    if math.isinf(d["buffer_cap_bits"]):
        d["buffer_cap_bits"] = "inf"
    return d


def save_checkpoint(path, policy, config_hash="", epoch=0):
    meta = policy.meta(config_hash=config_hash, compat_hash=policy.compat_hash(),
                       epoch=epoch)
    arrays = {f"param::{k}": v for k, v in policy.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(
            json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Returns (TokenPolicy, meta). Raises CheckpointError on any defect."""
    try:
        with np.load(path, allow_pickle=False) as data:
            raw = bytes(data["__meta__"].tobytes())
            meta = json.loads(raw.decode())
            params = {k[len("param::"):]: np.array(data[k])
                      for k in data.files if k.startswith("param::")}
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot decode checkpoint {path}: {exc}") from exc
    if meta.get("schema") != CKPT_SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema {meta.get('schema')!r}, "
                              f"expected {CKPT_SCHEMA}")
    pc = PolicyConfig(**meta["policy_config"])
    ed = dict(meta["env_config"])
    if ed.get("buffer_cap_bits") == "inf":
        ed["buffer_cap_bits"] = float("inf")
    ec = EnvConfig(**ed)
    policy = TokenPolicy(meta["role"], pc, ec, params=params)
    return policy, meta
