import math

import numpy as np
import pytest

from mooss.autodiff import Parameter, Tensor, grad_check
from mooss.contrastive import (
    ContrastiveConfig,
    TemperatureSchedule,
    level_loss,
    level_partition,
    mooss_loss,
    similarity_matrix,
    total_loss,
)
from mooss.errors import ConfigError, NonFiniteError
from oracles import infonce, naive_level_loss, naive_mooss_loss, naive_sims


def cfg(L, tau0=0.07, delta=0.075, lam=0.1):
    return ContrastiveConfig(L, TemperatureSchedule(tau0, delta), lam)


def loss_from_sims(sims, B, F, c):
    """Drive mooss_loss with a given similarity matrix: q = one-hot rows, W = sims, k = one-hot."""
    n = B * F
    eye = np.eye(n).reshape(B, F, n)
    return mooss_loss(Tensor(eye), Tensor(eye), Tensor(sims), c)


# ---------------------------------------------------------------- similarity

def test_similarity_identity_basis():
    q = np.eye(4).reshape(2, 2, 4)
    assert np.array_equal(similarity_matrix(q, q, np.eye(4)).data, np.eye(4))


def test_similarity_zero_matrix():
    rng = np.random.default_rng(0)
    q, k = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 5))
    assert not similarity_matrix(q, k, np.zeros((5, 5))).data.any()


def test_similarity_dot_product():
    assert similarity_matrix(np.array([[[1.0, 2.0]]]), np.array([[[3.0, 4.0]]]), np.eye(2)).data[0, 0] == 11.0


def test_similarity_matches_loops():
    rng = np.random.default_rng(4)
    q, k, W = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 4))
    np.testing.assert_allclose(similarity_matrix(q, k, W).data, naive_sims(q, k, W), atol=1e-12)


# ---------------------------------------------------------------- partition

def test_partition_figure_example():
    part = level_partition(3, 5, 3)
    sets = part.key_sets(0, 1)
    assert [len(s) for s in sets["levels"]] == [1, 2, 1, 1]
    assert sets["levels"][3] == {(0, 4)}
    cross = {k for k in sets["negatives"] if k[0] != 0}
    assert len(cross) == 10
    assert sets["negatives"] == cross  # no same-sequence key is further than 3 from index 1


def test_partition_boundary_empty_level():
    part = level_partition(1, 5, 3)
    assert part.key_sets(0, 2)["levels"][3] == set()


def test_partition_degenerate():
    part = level_partition(1, 1, 0)
    sets = part.key_sets(0, 0)
    assert sets["levels"] == [{(0, 0)}] and sets["negatives"] == set()


@pytest.mark.parametrize("B,F,L", [(1, 4, 2), (2, 6, 3), (3, 5, 0), (2, 8, 10)])
def test_partition_disjoint_cover(B, F, L):
    part = level_partition(B, F, L)
    for b in range(B):
        for i in range(F):
            sets = part.key_sets(b, i)
            groups = sets["levels"] + [sets["negatives"]]
            union = set().union(*groups)
            assert sum(len(g) for g in groups) == len(union) == B * F
            assert sets["levels"][0] == {(b, i)}


def test_denominator_shrinks_with_level():
    part = level_partition(2, 6, 4)
    prev = part.denominator(0)
    for level in range(1, 5):
        cur = part.denominator(level)
        assert not (cur & ~prev).any()
        prev = cur


def test_temperature_schedule_defaults():
    s = TemperatureSchedule()
    assert s.tau(0) == 0.07
    assert s.tau(2) == pytest.approx(0.07 + 2 * 0.075)
    with pytest.raises(ConfigError):
        TemperatureSchedule(0.07, 0.0).validate(2)
    with pytest.raises(ConfigError):
        TemperatureSchedule(-0.1, 0.075).validate(0)


# ---------------------------------------------------------------- level loss

def test_uniform_similarities_give_log_set_ratio():
    part = level_partition(2, 2, 0)
    for tau in (0.07, 1.0, 5.0):
        per_q, valid = level_loss(np.full((4, 4), 0.3), part, 0, tau)
        assert valid.all()
        np.testing.assert_allclose(per_q.data, math.log(4), atol=1e-12)


def test_saturated_positives_drive_loss_to_zero():
    part = level_partition(2, 3, 0)
    sims = np.eye(6) * 50.0
    per_q, _ = level_loss(sims, part, 0, 0.07)
    assert per_q.data.max() < 1e-12


def test_level_loss_matches_oracle():
    B, F, L = 2, 3, 1
    sims = np.random.default_rng(0).normal(size=(B * F, B * F))
    part = level_partition(B, F, L)
    for level in range(L + 1):
        tau = 0.07 + 0.075 * level
        per_q, valid = level_loss(sims, part, level, tau)
        for b in range(B):
            for i in range(F):
                ref = naive_level_loss(sims, B, F, b, i, level, tau)
                assert valid[b * F + i] == (ref is not None)
                if ref is not None:
                    assert per_q.data[b * F + i] == pytest.approx(ref, abs=1e-10)


# ---------------------------------------------------------------- total

@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("B,F,L", [(b, f, l) for b in (1, 2, 3) for f in (2, 4, 6) for l in (0, 1, 2)])
def test_mooss_loss_matches_oracle(B, F, L, seed):
    sims = np.random.default_rng(seed).normal(size=(B * F, B * F)) * 0.5
    res = loss_from_sims(sims, B, F, cfg(L))
    ref, ref_levels = naive_mooss_loss(sims, B, F, L, 0.07, 0.075)
    assert abs(res.total.item() - ref) <= 1e-10
    np.testing.assert_allclose(res.per_level, ref_levels, atol=1e-10)


def test_tiny_instance_from_embeddings():
    rng = np.random.default_rng(0)
    B, F, L, d = 2, 4, 2, 3
    q, k, W = rng.normal(size=(B, F, d)), rng.normal(size=(B, F, d)), rng.normal(size=(d, d))
    res = mooss_loss(q, k, W, cfg(L))
    ref, _ = naive_mooss_loss(naive_sims(q, k, W), B, F, L, 0.07, 0.075)
    assert abs(res.total.item() - ref) <= 1e-10


def test_level_zero_collapses_to_infonce():
    rng = np.random.default_rng(1)
    B, F = 3, 4
    sims = rng.normal(size=(B * F, B * F))
    res = loss_from_sims(sims, B, F, cfg(0))
    assert abs(res.total.item() - infonce(sims, 0.07)) <= 1e-10


def test_doubling_temperatures_with_equal_sims():
    sims = np.full((8, 8), 1.7)
    a = loss_from_sims(sims, 2, 4, cfg(2, 0.07, 0.075)).total.item()
    b = loss_from_sims(sims, 2, 4, cfg(2, 0.14, 0.15)).total.item()
    assert a == pytest.approx(b, abs=1e-12)


def test_shift_invariance():
    rng = np.random.default_rng(2)
    sims = rng.normal(size=(12, 12))
    part = level_partition(2, 6, 3)
    for level in range(4):
        a, _ = level_loss(sims, part, level, 0.1)
        b, _ = level_loss(sims + 7.5, part, level, 0.1)
        np.testing.assert_allclose(a.data, b.data, atol=1e-10)


def test_levels_beyond_sequence_are_skipped():
    sims = np.random.default_rng(3).normal(size=(6, 6))
    res = loss_from_sims(sims, 2, 3, cfg(5))
    assert res.per_level_counts[3:] == [0, 0, 0]
    assert res.per_level[3:] == [0.0, 0.0, 0.0]


def test_nan_embeddings_name_the_module():
    q = np.zeros((1, 2, 2))
    k = np.zeros((1, 2, 2))
    q[0, 1, 0] = np.nan
    with pytest.raises(NonFiniteError, match="decoder"):
        mooss_loss(q, k, np.eye(2), cfg(1))


def test_gradients_flow_to_queries_and_W_only():
    rng = np.random.default_rng(5)
    q = Parameter(rng.normal(size=(2, 4, 3)), name="q")
    W = Parameter(np.eye(3) + 0.1 * rng.normal(size=(3, 3)), name="W")
    k = Tensor(rng.normal(size=(2, 4, 3)))
    rep = grad_check(lambda: mooss_loss(q, k, W, cfg(2)).total, [q, W])
    assert rep.max_error <= 1e-4, rep.errors
    assert k.grad is None


def test_gradient_wrt_keys_when_tracked():
    rng = np.random.default_rng(6)
    q = Tensor(rng.normal(size=(2, 3, 3)))
    k = Parameter(rng.normal(size=(2, 3, 3)), name="k")
    rep = grad_check(lambda: mooss_loss(q, k, np.eye(3), cfg(1)).total, [k])
    assert rep.max_error <= 1e-4, rep.errors


def test_total_loss_arithmetic():
    assert total_loss(0.0, Tensor(2.0), 0.1).item() == pytest.approx(0.2)
    assert total_loss(Tensor(3.0), Tensor(1e6), 0.0).item() == 3.0
    assert total_loss(Tensor(1.5), Tensor(1.5), 1.0).item() == 3.0
