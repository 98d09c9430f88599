import numpy as np
import pytest

from stackelmac import tokens as tok
from stackelmac.config import EnvConfig, PolicyConfig
from stackelmac.env import FollowerObs, LeaderObs
from stackelmac.errors import ContractError, SerializationError


@pytest.fixture
def vocab():
    return tok.build_vocab(EnvConfig(), PolicyConfig())


def test_vocab_ids_dense_and_disjoint(vocab):
    ids = [vocab.NULL, vocab.SEP, vocab.ROLE_LEADER, vocab.ROLE_FOLLOWER]
    ids += [vocab.num(v) for v in range(vocab.i_max + 1)]
    ids += [vocab.ch(s) for s in range(vocab.n_channel_states)]
    ids += [vocab.buf(b) for b in range(tok.BUF_BUCKETS)]
    ids += [vocab.ucm(u) for u in range(vocab.ucm_vocab_size)]
    assert sorted(ids) == list(range(vocab.size))


def test_follower_prompt_schema(vocab):
    obs = FollowerObs(channel=1, buffer_bits=512, last_bitmap=None,
                      last_ucm=None, dcm_bits=None)
    p1 = tok.serialize_follower_obs(obs, vocab, 5, 2, 256)
    p2 = tok.serialize_follower_obs(obs, vocab, 5, 2, 256)
    assert np.array_equal(p1, p2)
    assert len(p1) == 3 + 2 * 5 + 2
    # 512 bits / 256-bit dPDUs -> bucket 2
    assert p1[2] == vocab.buf(2)
    # fresh history slots are null tokens
    assert np.all(p1[3:] == vocab.NULL)


def test_follower_prompt_with_history(vocab):
    obs = FollowerObs(channel=0, buffer_bits=0, last_bitmap=(1, 0, 1, 0, 0),
                      last_ucm=(3, 7), dcm_bits=(0, 1, 0, 0, 0))
    p = tok.serialize_follower_obs(obs, vocab, 5, 2, 256)
    assert p[3] == vocab.num(1) and p[4] == vocab.num(0)
    assert p[8] == vocab.ucm(3) and p[9] == vocab.ucm(7)
    assert p[11] == vocab.num(1)


def test_follower_prompt_out_of_range(vocab):
    bad = FollowerObs(channel=7, buffer_bits=0, last_bitmap=None,
                      last_ucm=None, dcm_bits=None)
    with pytest.raises(SerializationError):
        tok.serialize_follower_obs(bad, vocab, 5, 2, 256)


def _leader_obs(i, vocab):
    return LeaderObs(csi=tuple(0 for _ in range(i)),
                     ucms=tuple((1, 2) for _ in range(i)),
                     dcms=tuple((0,) * 5 for _ in range(i)))


def test_leader_prompt_affine_in_ue_count(vocab):
    p3 = tok.serialize_leader_obs(_leader_obs(3, vocab), vocab, 5, 2)
    p5 = tok.serialize_leader_obs(_leader_obs(5, vocab), vocab, 5, 2)
    block = 5 + 2 + 2   # channel + ucm + dcm + sep
    assert len(p3) == 1 + 3 * block
    assert len(p5) - len(p3) == 2 * block
    assert (p3 == vocab.SEP).sum() == 3


def test_leader_prompt_permutation_permutes_blocks(vocab):
    obs = LeaderObs(csi=(0, 2), ucms=((1, 2), (3, 4)), dcms=((1, 0, 0, 0, 0),
                                                             (0, 1, 0, 0, 0)))
    rev = LeaderObs(csi=(2, 0), ucms=((3, 4), (1, 2)), dcms=((0, 1, 0, 0, 0),
                                                             (1, 0, 0, 0, 0)))
    p = tok.serialize_leader_obs(obs, vocab, 5, 2)
    q = tok.serialize_leader_obs(rev, vocab, 5, 2)
    block = 9
    assert np.array_equal(p[1:1 + block], q[1 + block:1 + 2 * block])
    assert np.array_equal(p[1 + block:1 + 2 * block], q[1:1 + block])


# ---------------------------------------------------------------------------
# PAG masks
# ---------------------------------------------------------------------------

def test_leader_mask_size(vocab):
    masks = tok.pag_mask("leader", 3, vocab, 5, 2)
    assert len(masks) == 5
    for m in masks:
        assert len(m) == 4                      # tokens 0..3
        assert set(m) == {vocab.num(v) for v in range(4)}


def test_follower_mask_positions(vocab):
    masks = tok.pag_mask("follower", 4, vocab, 5, 2)
    assert len(masks) == 7
    for m in masks[:5]:
        assert set(m) == {vocab.num(0), vocab.num(1)}
    for m in masks[5:]:
        assert set(m) == {vocab.ucm(u) for u in range(vocab.ucm_vocab_size)}


def test_mask_rejects_zero_ues(vocab):
    with pytest.raises(ContractError):
        tok.pag_mask("leader", 0, vocab, 5, 2)


def test_decode_roundtrip(vocab):
    dcm = (0, 3, 1, 0, 2)
    toks = [vocab.num(t) for t in dcm]
    assert tok.decode_leader_action(toks, vocab) == dcm
    bitmap, ucm = (1, 0, 1, 1, 0), (5, 0)
    toks = [vocab.num(b) for b in bitmap] + [vocab.ucm(u) for u in ucm]
    assert tok.decode_follower_action(toks, vocab, 5, 2) == (bitmap, ucm)
