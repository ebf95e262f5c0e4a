import math

import numpy as np
import pytest
from oracles import bce_formula, clip_loss_loops, ntxent_two
from scipy.stats import chisquare

from ssmm import objectives as L
from ssmm.objectives import ClipConfig, ContractError
from ssmm.tensor import Tensor

CLIP_STANDARD_N2 = 0.31326168751822286  # ln(1 + e^-1)
P_FIRST = 0.9996646498695335  # e^8 / (e^8 + 1)


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def test_orthogonal_fixture_both_modes():
    eye = np.eye(2)
    std, _ = L.clip_loss(eye, eye, ClipConfig(temperature=1.0, lam=0.5))
    lit, _ = L.clip_loss(eye, eye, ClipConfig(temperature=1.0, lam=0.5, denominator="literal"))
    assert abs(std.item() - CLIP_STANDARD_N2) < 1e-12
    assert abs(lit.item() - (-1.0)) < 1e-12


@pytest.mark.parametrize("literal", [False, True])
def test_clip_matches_loop_oracle(literal):
    rng = np.random.default_rng(0)
    zi, zt = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
    cfg = ClipConfig(temperature=0.3, lam=0.7, denominator="literal" if literal else "standard")
    got = L.clip_loss(zi, zt, cfg)[0].item()
    assert abs(got - clip_loss_loops(zi.tolist(), zt.tolist(), 0.3, 0.7, literal)) < 1e-12


def test_clip_sum_reduction_scales_mean():
    rng = np.random.default_rng(1)
    zi, zt = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    m = L.clip_loss(zi, zt, ClipConfig(reduction="mean"))[0].item()
    s = L.clip_loss(zi, zt, ClipConfig(reduction="sum"))[0].item()
    assert abs(s - 4 * m) < 1e-12


def test_clip_permutation_invariant():
    rng = np.random.default_rng(2)
    zi, zt = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
    perm = rng.permutation(6)
    a = L.clip_loss(zi, zt)[0].item()
    b = L.clip_loss(zi[perm], zt[perm])[0].item()
    assert abs(a - b) < 1e-12


def test_clip_contracts():
    with pytest.raises(ContractError):
        L.clip_loss(np.eye(2)[:1], np.eye(2)[:1])
    with pytest.raises(ValueError):
        ClipConfig(temperature=0.0)
    with pytest.raises(ValueError):
        ClipConfig(lam=1.5)
    with pytest.raises(ValueError):
        ClipConfig(denominator="other")


def test_ntxent_hand_expanded():
    rng = np.random.default_rng(3)
    z1, z2 = unit_rows(rng, 2, 3), unit_rows(rng, 2, 3)
    assert abs(L.ntxent_loss(z1, z2, 0.5).item() - ntxent_two(z1, z2, 0.5)) < 1e-12


def test_ntxent_permutation_invariant():
    rng = np.random.default_rng(4)
    z1, z2 = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
    perm = rng.permutation(5)
    assert abs(L.ntxent_loss(z1, z2).item() - L.ntxent_loss(z1[perm], z2[perm]).item()) < 1e-12


def test_mining_two_pairs_is_deterministic():
    s = np.array([[1.0, 0.3], [0.2, 1.0]])
    rng = np.random.default_rng(0)
    for _ in range(50):
        nt, ni = L.mine_hard_negatives(s, 0.1, rng)
        assert nt.tolist() == [1, 0] and ni.tolist() == [1, 0]


def test_mining_weights_closed_form():
    s = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.1], [0.1, 0.1, 1.0]])
    w = L.negative_weights(s, 0.1)
    assert w[0, 0] == 0.0
    assert abs(w[0, 1] - P_FIRST) < 1e-12
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-15)


def test_mining_uniform_similarities_chi_square():
    n = 5
    s = np.full((n, n), 0.3)
    rng = np.random.default_rng(5)
    offsets = []
    for _ in range(10_000 // n):
        nt, _ = L.mine_hard_negatives(s, 0.1, rng)
        offsets.extend((nt - np.arange(n)) % n)
    counts = np.bincount(offsets, minlength=n)
    assert counts[0] == 0
    assert chisquare(counts[1:]).pvalue > 0.01


def test_itm_values():
    assert abs(L.itm_loss(np.zeros(3), np.zeros(3)).item() - math.log(2)) < 1e-12
    assert L.itm_loss(np.full(2, 20.0), np.full(2, -20.0)).item() < 1e-8
    rng = np.random.default_rng(6)
    pos, neg = rng.normal(size=7), rng.normal(size=7)
    ref = bce_formula(np.r_[pos, neg], np.r_[np.ones(7), np.zeros(7)])
    assert abs(L.itm_loss(pos, neg).item() - ref) < 1e-12
    with pytest.raises(ContractError):
        L.itm_loss(np.zeros(2), np.zeros(3))


def test_total_is_arithmetic_mean():
    assert L.total_loss(0.0, 0.0).item() == 0.0
    assert L.total_loss(0.4, 0.6).item() == 0.5
    rng = np.random.default_rng(7)
    for a, b in rng.normal(size=(20, 2)):
        assert L.total_loss(Tensor(a), Tensor(b)).item() == (a + b) / 2
