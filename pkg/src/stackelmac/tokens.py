"""Structured token vocabulary, observation serialization, and PAG masks.

Observations are encoded with a fixed schema over a small dense-id
vocabulary instead of natural-language prompts; what matters downstream
is preserved: leader prompts grow affinely with the UE count, follower
prompts have constant length, and decoding is restricted per position to
the valid protocol tokens.

Prompt schemas (NULL fills never-yet-seen history slots):
  follower: [ROLE_U][CH c][BUF bucket][last bitmap x M][last UCM x K][DCM bits x M]
  leader:   [ROLE_B] then per UE: [CH c_hat][UCM x K][DCM bits x M][SEP]
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, SerializationError

BUF_BUCKETS = 16  # buffer occupancy is clipped to 0..15 whole dPDUs


@dataclass(frozen=True)
class Vocab:
    """Dense token-id layout derived from the run configuration."""

    i_max: int
    n_channel_states: int
    ucm_vocab_size: int

    NULL = 0
    SEP = 1
    ROLE_LEADER = 2
    ROLE_FOLLOWER = 3

    @property
    def num_base(self):
        return 4

    def num(self, value):
        """Numeric token for 0..i_max (allocation ids and bitmap bits)."""
        if not 0 <= value <= self.i_max:
            raise SerializationError(f"numeric token {value} outside 0..{self.i_max}")
        return self.num_base + value

    def ch(self, state):
        if not 0 <= state < self.n_channel_states:
            raise SerializationError(f"channel state {state} outside "
                                     f"0..{self.n_channel_states - 1}")
        return self.num_base + self.i_max + 1 + state

    def buf(self, bucket):
        if not 0 <= bucket < BUF_BUCKETS:
            raise SerializationError(f"buffer bucket {bucket} outside 0..{BUF_BUCKETS - 1}")
        return self.num_base + self.i_max + 1 + self.n_channel_states + bucket

    def ucm(self, symbol):
        if not 0 <= symbol < self.ucm_vocab_size:
            raise SerializationError(f"UCM symbol {symbol} outside "
                                     f"0..{self.ucm_vocab_size - 1}")
        return (self.num_base + self.i_max + 1 + self.n_channel_states
                + BUF_BUCKETS + symbol)

    @property
    def size(self):
        return (self.num_base + self.i_max + 1 + self.n_channel_states
                + BUF_BUCKETS + self.ucm_vocab_size)

    def num_value(self, token):
        v = token - self.num_base
        if not 0 <= v <= self.i_max:
            raise SerializationError(f"token {token} is not a numeric token")
        return v

    def ucm_value(self, token):
        base = self.num_base + self.i_max + 1 + self.n_channel_states + BUF_BUCKETS
        v = token - base
        if not 0 <= v < self.ucm_vocab_size:
            raise SerializationError(f"token {token} is not a UCM token")
        return v


def build_vocab(env_config, policy_config):
    return Vocab(i_max=policy_config.i_max,
                 n_channel_states=env_config.n_channel_states,
                 ucm_vocab_size=env_config.ucm_vocab_size)


def serialize_follower_obs(obs, vocab, num_rbgs, ucm_len, dpdu_bits):
    """Constant-length follower prompt (3 + 2M + K tokens)."""
    toks = [vocab.ROLE_FOLLOWER, vocab.ch(obs.channel)]
    if obs.buffer_bits < 0:
        raise SerializationError(f"negative buffer occupancy {obs.buffer_bits}")
    bucket = min(obs.buffer_bits // dpdu_bits, BUF_BUCKETS - 1)
    toks.append(vocab.buf(bucket))
    toks.extend(_bit_tokens(obs.last_bitmap, vocab, num_rbgs))
    toks.extend(_ucm_tokens(obs.last_ucm, vocab, ucm_len))
    toks.extend(_bit_tokens(obs.dcm_bits, vocab, num_rbgs))
    return np.asarray(toks, dtype=np.int64)


def serialize_leader_obs(obs, vocab, num_rbgs, ucm_len):
    """Leader prompt: role marker plus one sep-delimited block per UE.

    Length is 1 + I * (M + K + 2): affine in the active UE count.
    """
    toks = [vocab.ROLE_LEADER]
    for csi, ucm, dcm in zip(obs.csi, obs.ucms, obs.dcms):
        toks.append(vocab.ch(csi))
        toks.extend(_ucm_tokens(ucm, vocab, ucm_len))
        toks.extend(_bit_tokens(dcm, vocab, num_rbgs))
        toks.append(vocab.SEP)
    return np.asarray(toks, dtype=np.int64)


def _bit_tokens(bits, vocab, width):
    if bits is None:
        return [vocab.NULL] * width
    if len(bits) != width:
        raise SerializationError(f"bit field has length {len(bits)}, expected {width}")
    return [vocab.num(int(b)) for b in bits]


def _ucm_tokens(ucm, vocab, width):
    if ucm is None:
        return [vocab.NULL] * width
    if len(ucm) != width:
        raise SerializationError(f"UCM field has length {len(ucm)}, expected {width}")
    return [vocab.ucm(int(u)) for u in ucm]


# ---------------------------------------------------------------------------
# Protocol action grammar: per-position admissible token sets.
# ---------------------------------------------------------------------------

def pag_mask(role, num_active_ues, vocab, num_rbgs, ucm_len):
    """Per-position admissible token ids for one action sequence.

    leader:   M positions, each {NUM_0 .. NUM_I_t}
    follower: M bitmap positions {NUM_0, NUM_1} then K UCM positions
    """
    if num_active_ues < 1:
        raise ContractError(f"need at least one active UE, got {num_active_ues}")
    if role == "leader":
        if num_active_ues > vocab.i_max:
            raise ContractError(f"num_active_ues {num_active_ues} exceeds vocab "
                                f"i_max {vocab.i_max}")
        alloc = np.asarray([vocab.num(v) for v in range(num_active_ues + 1)],
                           dtype=np.int64)
        return [alloc.copy() for _ in range(num_rbgs)]
    if role == "follower":
        bit = np.asarray([vocab.num(0), vocab.num(1)], dtype=np.int64)
        ucm = np.asarray([vocab.ucm(v) for v in range(vocab.ucm_vocab_size)],
                         dtype=np.int64)
        return [bit.copy() for _ in range(num_rbgs)] + [ucm.copy() for _ in range(ucm_len)]
    raise ContractError(f"unknown role {role!r}")


def decode_leader_action(tokens, vocab):
    """Token sequence -> RBG->UE allocation map (ints 0..I)."""
    return tuple(vocab.num_value(int(t)) for t in tokens)


def decode_follower_action(tokens, vocab, num_rbgs, ucm_len):
    """Token sequence -> (bitmap, ucm symbols)."""
    toks = [int(t) for t in tokens]
    if len(toks) != num_rbgs + ucm_len:
        raise ContractError(f"follower action must have {num_rbgs + ucm_len} tokens")
    bitmap = tuple(vocab.num_value(t) for t in toks[:num_rbgs])
    if any(b not in (0, 1) for b in bitmap):
        raise ContractError("bitmap tokens must decode to 0/1")
    ucm = tuple(vocab.ucm_value(t) for t in toks[num_rbgs:])
    return bitmap, ucm
