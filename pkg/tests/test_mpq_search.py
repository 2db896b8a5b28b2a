import math

import numpy as np
import pytest
from search_oracle import exhaustive_allocation, outlier_layer

from mpqdm2 import numkit
from mpqdm2 import quantizer as qz
from mpqdm2.errors import ContractError
from mpqdm2.mpq_search import (
    default_groups,
    fit_channel,
    apply_channel,
    partition_groups,
    rank_channels,
    search_allocation,
    select_op_mode,
)


def test_spike_channel_ranked_first(rng):
    w = rng.normal(size=(40, 6))
    w[:, 4] = 0.01 * rng.normal(size=40)
    w[7, 4] = 5.0
    ranked = rank_channels(w)
    assert ranked[0][0] == 4


def test_kurtosis_values_match_oracle(rng):
    w = rng.standard_t(4, size=(30, 8))
    for j, k in rank_channels(w):
        assert k == numkit.kurtosis(w[:, j])


def test_identical_channels_keep_index_order():
    col = np.array([1.0, -2.0, 0.5, 3.0])
    w = np.tile(col[:, None], (1, 5))
    assert [j for j, _ in rank_channels(w)] == [0, 1, 2, 3, 4]


def test_degenerate_channels_rank_last(rng):
    w = rng.normal(size=(20, 4))
    w[:, 1] = 0.7
    assert rank_channels(w)[-1] == (1, 0.0)


@pytest.mark.parametrize("c,g,sizes", [(10, 10, [1] * 10), (10, 1, [10]), (23, 5, [5, 5, 5, 4, 4])])
def test_partition_sizes(c, g, sizes):
    ranked = [(j, float(c - j)) for j in range(c)]
    groups = partition_groups(ranked, g)
    assert [len(gr.channels) for gr in groups] == sizes
    flat = [j for gr in groups for j in gr.channels]
    assert flat == list(range(c))


def test_partition_contract():
    with pytest.raises(ContractError):
        partition_groups([(0, 1.0)], 2)
    with pytest.raises(ContractError):
        partition_groups([(0, 1.0)], 0)


def test_default_groups():
    assert default_groups(64) == 6 and default_groups(5) == 1


def test_identical_channels_get_uniform_allocation(rng):
    # identical weight columns fed by orthogonal activation columns: the
    # objective is a sum of equal per-channel terms, so nothing beats uniform
    col = rng.normal(size=12)
    w = np.tile(col[:, None], (1, 9))
    x = np.tile(np.eye(9), (4, 1))
    res = search_allocation(w, x, 2, g=3)
    assert res.bits.tolist() == [2] * 9
    assert res.objective == res.baseline


def test_outlier_group_gets_more_bits():
    rng = numkit.make_rng(5)
    w, x = outlier_layer(rng, 24, 9, outlier_cols=(0, 1, 2), scale=25.0)
    # best-behaved group: two-point columns, exactly representable with few bits
    w[:, 6:] = np.where(rng.uniform(size=(24, 3)) < 0.5, -1.0, 1.0)
    best_obj, best_bits, _ = exhaustive_allocation(w, x, 3, 3)
    res = search_allocation(w, x, 3, g=3)
    assert res.objective == pytest.approx(best_obj, rel=1e-9)
    assert np.array_equal(res.bits, best_bits)
    assert res.bits.tolist() == [4, 4, 4, 3, 3, 3, 2, 2, 2]


def test_matches_exhaustive_c20_g2():
    rng = numkit.make_rng(20)
    w, x = outlier_layer(rng, 16, 20, outlier_cols=(3, 11))
    best_obj, _, uniform_obj = exhaustive_allocation(w, x, 2, 2)
    res = search_allocation(w, x, 2, g=2)
    assert abs(res.objective - best_obj) <= 1e-9 * max(1.0, best_obj)
    assert res.baseline == pytest.approx(uniform_obj, rel=1e-12)
    assert res.bits.sum() == 40


@pytest.mark.parametrize("seed", range(4))
def test_budget_and_dominance(seed):
    rng = numkit.make_rng(100 + seed)
    w, x = outlier_layer(rng, 12, 17, outlier_cols=(seed,))
    for n in (2, 3):
        res = search_allocation(w, x, n)
        assert res.bits.sum() == 17 * n
        assert set(res.bits.tolist()) <= {n - 1, n, n + 1}
        assert res.objective <= res.baseline * (1 + 1e-9)
        assert sum(res.histogram().values()) == 17


def test_surplus_upgrades_ceil_fraction(rng):
    w, x = outlier_layer(rng, 10, 23, outlier_cols=(1, 5))
    base = search_allocation(w, x, 2, g=2)
    res = search_allocation(w, x, 2, g=2, surplus_2bit=0.1)
    extra = math.ceil(0.1 * 23)
    assert res.bits.sum() == 23 * 2 + extra
    assert len(res.surplus_channels) == extra
    diff = res.bits - base.bits
    assert sorted(np.flatnonzero(diff).tolist()) == list(res.surplus_channels)
    assert set(diff.tolist()) <= {0, 1}


def test_search_deterministic(rng):
    w, x = outlier_layer(rng, 10, 14, outlier_cols=(2,))
    a = search_allocation(w, x, 2, g=3)
    b = search_allocation(w, x, 2, g=3)
    assert np.array_equal(a.bits, b.bits) and a.modes == b.modes and a.objective == b.objective
    assert [s for s in a.specs] == [s for s in b.specs]


def test_search_contracts(rng):
    w, x = outlier_layer(rng, 4, 5)
    with pytest.raises(ContractError):
        search_allocation(w, x, 1)
    with pytest.raises(ContractError):
        search_allocation(w, x, 2, surplus_2bit=1.5)
    with pytest.raises(ContractError):
        search_allocation(w, x[:, :3], 2)


def test_specs_reproduce_allocation(rng):
    w, x = outlier_layer(rng, 8, 12, outlier_cols=(0,))
    res = search_allocation(w, x, 2, g=3)
    assert [s.bits for s in res.specs] == res.bits.tolist()
    state = qz.LayerQuantState.from_specs(res.specs, res.scaling, 8)
    assert np.array_equal(state.bits, res.bits)


# -- op mode ----------------------------------------------------------------


def _mode_oracle(w, x, bits, base_bits, act_bits=4):
    xq = qz.quantize_uniform(x, qz.fit_uniform(x, act_bits))
    target = x @ w.T
    errs = {}
    for mode in (qz.JOINT, qz.SEPARATE):
        wq = np.stack([apply_channel(w[:, j], fit_channel(w[:, j], base_bits, bits - base_bits, mode),
                                     bits - base_bits) for j in range(w.shape[1])], axis=1)
        errs[mode] = float(np.sum((target - xq @ wq.T) ** 2))
    tol = 1e-12 * float(np.sum(target**2))
    return qz.SEPARATE if errs[qz.SEPARATE] < errs[qz.JOINT] - tol else qz.JOINT


def test_lattice_weights_choose_joint():
    # columns on the joint grid: a 1-bit base of step 1 plus the s/4 tier
    w = np.array([[-0.75, -0.25, 0.25, 0.75] * 3]).reshape(-1, 2)
    x = numkit.make_rng(3).normal(size=(20, 2))
    assert select_op_mode(w, x, 2, 1) == qz.JOINT


def test_outlier_weights_choose_separate():
    rng = numkit.make_rng(9)
    w = rng.normal(0, 0.1, size=(100, 2))
    w[5, 0] = 3.0
    w[17, 1] = -3.0
    x = np.abs(rng.normal(size=(30, 2))) + 1.0
    assert select_op_mode(w, x, 2, 1, act_bits=8) == qz.SEPARATE


def test_mode_matches_two_way_oracle():
    rng = numkit.make_rng(50)
    for i in range(50):
        w = rng.standard_t(3, size=(16, 3))
        x = rng.normal(size=(24, 3))
        tiers = 1 + i % 2
        assert select_op_mode(w, x, 1 + tiers, 1) == _mode_oracle(w, x, 1 + tiers, 1)


def test_empty_group_rejected():
    with pytest.raises(ContractError):
        select_op_mode(np.zeros((3, 0)), np.zeros((4, 0)), 2, 1)
