import itertools

import numpy as np
import pytest

from stackelmac import game
from stackelmac.config import GameWeights
from stackelmac.errors import ContractError, DecodeError


# ---------------------------------------------------------------------------
# intent bits
# ---------------------------------------------------------------------------

def test_dcm_bits_examples():
    assert game.dcm_bits_for_ue((1, 0, 2, 1, 0), 1, 3) == (1, 0, 0, 1, 0)
    assert game.dcm_bits_for_ue((3, 3), 3, 3) == (1, 1)
    for i in range(1, 4):
        assert game.dcm_bits_for_ue((0, 0, 0), i, 3) == (0, 0, 0)


def test_dcm_bits_rejects_out_of_range_token():
    with pytest.raises(DecodeError):
        game.dcm_bits_for_ue((4,), 1, 3)
    with pytest.raises(ContractError):
        game.dcm_bits_for_ue((1,), 0, 3)


# ---------------------------------------------------------------------------
# consistency
# ---------------------------------------------------------------------------

def test_consistency_examples():
    assert game.consistency((1, 0, 1), (1, 0, 1)) == 1.0
    assert game.consistency((1, 0, 1), (0, 1, 0)) == 0.0
    assert game.consistency((1, 0, 1, 0, 1), (1, 0, 0, 0, 1)) == pytest.approx(0.8)


def test_consistency_symmetric_and_hamming_complement(rng):
    for _ in range(100):
        m = int(rng.integers(1, 8))
        a = tuple(int(x) for x in rng.integers(0, 2, size=m))
        b = tuple(int(x) for x in rng.integers(0, 2, size=m))
        c = game.consistency(a, b)
        assert c == game.consistency(b, a)
        hamming = sum(x != y for x, y in zip(a, b)) / m
        assert c == pytest.approx(1.0 - hamming)


def test_consistency_length_mismatch():
    with pytest.raises(ContractError):
        game.consistency((1, 0), (1, 0, 1))


# ---------------------------------------------------------------------------
# follower utility
# ---------------------------------------------------------------------------

def test_follower_utility_examples(weights):
    assert game.follower_utility(0, 0, 0.5, weights) == pytest.approx(5.0)
    assert game.follower_utility(2, 2, 1.0, weights) == pytest.approx(18.0)
    assert game.follower_utility(0, 3, 0.0, weights) == 0.0
    with pytest.raises(ContractError):
        game.follower_utility(3, 2, 0.0, weights)


def test_follower_utility_monotone(weights, rng):
    for _ in range(50):
        tx = int(rng.integers(1, 6))
        rec = int(rng.integers(0, tx))
        c = float(rng.random())
        base = game.follower_utility(rec, tx, c, weights)
        assert game.follower_utility(rec + 1, tx, c, weights) >= base
        assert game.follower_utility(rec, tx, min(c + 0.1, 1.0), weights) >= base


# ---------------------------------------------------------------------------
# fairness
# ---------------------------------------------------------------------------

def test_jfi_examples():
    assert game.jfi((3, 3, 3)) == pytest.approx(1.0)
    assert game.jfi((0, 0, 5, 0, 0)) == pytest.approx(0.2)
    assert game.jfi((1, 2, 3)) == pytest.approx(6 / 7)
    assert game.jfi((0, 0, 0)) == 1.0


def test_jfi_bounds(rng):
    for _ in range(200):
        n = int(rng.integers(1, 9))
        x = rng.integers(0, 10, size=n)
        if x.sum() == 0:
            continue
        v = game.jfi(x)
        assert 1 / n - 1e-12 <= v <= 1 + 1e-12
        if len(set(x.tolist())) == 1:
            assert v == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# leader utility
# ---------------------------------------------------------------------------

def test_leader_utility_examples(weights):
    assert game.leader_utility((2, 2), (5, 5), weights) == pytest.approx(7.0)
    assert game.leader_utility((0, 0, 0), (0, 0, 0), weights) == pytest.approx(5.0)
    assert game.leader_utility((4,), (3,), weights) == pytest.approx(9.0)


def test_leader_utility_permutation_invariant(weights, rng):
    for _ in range(50):
        n = int(rng.integers(1, 6))
        rec = rng.integers(0, 5, size=n)
        x = rng.integers(0, 9, size=n)
        perm = rng.permutation(n)
        assert game.leader_utility(rec, x, weights) == pytest.approx(
            game.leader_utility(rec[perm], x[perm], weights))


# ---------------------------------------------------------------------------
# stage game: interactive utility and potential
# ---------------------------------------------------------------------------

def test_interactive_utility_examples():
    st = game.StageGame(2, (1.0,))
    assert game.interactive_utility([(1,), (0,)], 0, st) == 1.0
    assert game.interactive_utility([(1,), (1,)], 0, st) == 0.0
    assert game.interactive_utility([(1,), (1,)], 1, st) == 0.0
    st3 = game.StageGame(3, (2.0, 3.0))
    prof = [(1, 0), (0, 1), (1, 1)]
    assert [game.interactive_utility(prof, i, st3) for i in range(3)] == [0, 0, 0]


def test_potential_examples():
    st = game.StageGame(2, (2.0,))
    assert game.potential_value([(0,), (0,)], st) == 0.0
    assert game.potential_value([(1,), (0,)], st) == 2.0
    # Rosenthal-style sum: a collided RBG still contributes N_m once
    assert game.potential_value([(1,), (1,)], st) == 2.0


def test_exact_potential_identity_exhaustive(rng):
    # independent oracle route: plain loops over game-module functions
    for num_ues, num_rbgs in [(2, 1), (2, 2), (3, 2)]:
        for _ in range(10):
            caps = rng.integers(1, 5, size=num_rbgs).astype(float)
            st = game.StageGame(num_ues, caps)
            bitmaps = list(itertools.product((0, 1), repeat=num_rbgs))
            for prof in itertools.product(bitmaps, repeat=num_ues):
                phi = game.potential_value(prof, st)
                for i in range(num_ues):
                    f0 = game.interactive_utility(prof, i, st)
                    for alt in bitmaps:
                        dev = prof[:i] + (alt,) + prof[i + 1:]
                        df = game.interactive_utility(dev, i, st) - f0
                        dphi = game.potential_value(dev, st) - phi
                        assert abs(df - dphi) <= 1e-12


def test_stage_utility_combines_terms(weights):
    st = game.StageGame(2, (1.0, 1.0), dcm_bits=((1, 0), (0, 1)))
    prof = [(1, 0), (0, 1)]
    # sole transmitter on one RBG each, full consistency
    assert game.stage_utility(prof, 0, st, weights) == pytest.approx(8.0 + 10.0)
    assert game.stage_leader_value(prof, st, weights) == pytest.approx(1.0 + 5.0)
