from fractions import Fraction

import numpy as np
import pytest

from opticomp.allocate import (
    BudgetModel,
    CompressionPlan,
    PlanLayer,
    allocate_ranks,
    basis_rank,
    max_rank,
    prepare_full_rank,
    psi,
    redistribute,
    select_batch,
    step_size,
)
from opticomp.decompose import ScalingDiag, compute_scaling, expand
from opticomp.linalg import frobenius_norm, truncated_svd
from opticomp.util import philox_rng


def random_layers(seed, count, m=32, n=48, t=64):
    rng = philox_rng(seed, 50)
    layers, scaling = [], {}
    for i in range(count):
        lid = f"layer{i}"
        layers.append((lid, rng.normal(size=(m, n))))
        scaling[lid] = compute_scaling(rng.normal(size=(n, t)))
    return layers, scaling


class TestPrepareFullRank:
    def test_diagonal_layer_slicing(self):
        w = np.diag([3.0, 2.0, 1.0, 0.5])
        scaling = {"l": ScalingDiag.identity(4)}
        state = prepare_full_rank([("l", w)], scaling, s=0.25, g=2, iters=2)
        layer = state.layers[0]
        a, b = layer.sliced_factors(2)
        assert a.shape == (4, 2) and b.shape == (2, 4)
        # top-2 triplets of the residual: singular values sorted descending
        assert layer.decomposition.singular_values[0] >= layer.decomposition.singular_values[1]

    def test_error_monotone_in_rank(self):
        layers, scaling = random_layers(0, 1)
        state = prepare_full_rank(layers, scaling, s=0.125, g=4, iters=5)
        layer = state.layers[0]
        errors = [layer.error_at(r) for r in range(1, layer.r_max + 1)]
        assert all(e1 >= e2 - 1e-12 for e1, e2 in zip(errors, errors[1:]))
        assert layer.error_at(layer.r_max) <= layer.error_at(1)

    def test_slice_matches_recompute_oracle(self):
        layers, scaling = random_layers(1, 4, m=24, n=36)
        state = prepare_full_rank(layers, scaling, s=0.125, g=4, iters=5)
        for (lid, w), layer in zip(layers, state.layers):
            d = scaling[lid]
            wd = w * d.d[None, :]
            from opticomp.decompose import _scale_sparse_cols

            residual = wd - expand(_scale_sparse_cols(layer.decomposition.sparse, d.d))
            for r in (1, 3, layer.r_max // 2, layer.r_max):
                direct = frobenius_norm(wd - truncated_svd(residual, r).reconstruct()
                                        - (wd - residual)) / frobenius_norm(wd)
                assert layer.error_at(r) == pytest.approx(direct, abs=1e-10)


class TestBasisRank:
    def test_base_scale(self):
        assert basis_rank(768, 12) == 12

    def test_small_scale(self):
        assert basis_rank(384, 12) == 6

    def test_override(self):
        assert basis_rank(768, 12, override=4) == 4


class TestStepSize:
    @pytest.mark.parametrize(
        "remaining,expected_of_b",
        [(1000, 2), (500, 2), (499, 1), (250, 1)],
    )
    def test_branches(self, remaining, expected_of_b):
        assert step_size(remaining, 1000, 12) == expected_of_b * 12

    def test_last_branch_ceil(self):
        assert step_size(249, 1000, 12) == 6
        assert step_size(100, 1000, 5) == 3  # ceil(5/2)
        assert step_size(1, 1000, 1) == 1  # min 1


class TestSelectBatch:
    def test_uniform_errors_tie_break(self):
        batch, probs = select_batch(np.array([1.0, 1.0, 1.0, 1.0]), threshold=0.5)
        assert batch == [0, 1]
        np.testing.assert_allclose(probs, [0.25, 0.25])

    def test_peaked_softmax_single_layer(self):
        batch, probs = select_batch(np.array([10.0, 0.0, 0.0, 0.0]), threshold=0.5)
        assert batch == [0]
        assert probs[0] > 0.5

    def test_threshold_one_takes_all_unsaturated(self):
        saturated = np.array([False, True, False, False])
        batch, _ = select_batch(np.array([1.0, 9.0, 2.0, 3.0]), threshold=1.0, saturated=saturated)
        assert sorted(batch) == [0, 2, 3]

    def test_all_saturated_empty(self):
        batch, probs = select_batch(np.array([1.0, 2.0]), saturated=np.array([True, True]))
        assert batch == [] and len(probs) == 0


class TestRedistribute:
    def test_equal_probs(self):
        assert redistribute([0, 1], np.array([0.5, 0.5]), 6) == [6, 6]

    def test_proportional(self):
        assert redistribute([0, 1], np.array([0.75, 0.25]), 6) == [9, 3]

    def test_cap_and_spill(self):
        inc = redistribute([0, 1], np.array([0.75, 0.25]), 6, headroom=[1, 100])
        assert inc == [1, 11]

    def test_every_increment_at_least_one(self):
        inc = redistribute([0, 1, 2], np.array([0.98, 0.01, 0.01]), 4)
        assert min(inc) >= 1
        assert sum(inc) == 12


def planted_rank_layers(seed, low_ranks, m=64, n=96, t=32):
    """Layers with exact planted ranks (plus per-layer calibration scaling)."""
    rng = philox_rng(seed, 51)
    layers, scaling = [], {}
    for i, rank in enumerate(low_ranks):
        lid = f"layer{i}"
        q1, _ = np.linalg.qr(rng.normal(size=(m, rank)))
        q2, _ = np.linalg.qr(rng.normal(size=(n, rank)))
        sig = np.linspace(1.0, 0.5, rank) * m
        layers.append((lid, (q1 * sig) @ q2.T))
        scaling[lid] = compute_scaling(rng.normal(size=(n, t)))
    return layers, scaling


class TestAllocateRanks:
    def test_single_layer_exact_budget_reaches_r_max(self):
        # 6x45: r_max = floor(270/51) = 5 leaves 15 params of slack below
        # break-even, enough to also hold the d=1 sparse columns.
        layers, scaling = random_layers(2, 1, m=6, n=45)
        state = prepare_full_rank(layers, scaling, s=0.022, g=3, iters=3)
        r_max = state.layers[0].r_max
        alpha = 1.0 - (r_max * 51 + 6 * 1) / 270  # budget exactly funds r_max
        plan = allocate_ranks(state, alpha=alpha, sparse_ratio=0.022, g=3, b=2, threshold=0.5)
        assert plan.layers[0].r == r_max

    def test_two_identical_layers_near_symmetric(self):
        rng = philox_rng(3, 52)
        w = rng.normal(size=(32, 48))
        x = rng.normal(size=(48, 64))
        scaling = {"a": compute_scaling(x), "b": compute_scaling(x)}
        state = prepare_full_rank([("a", w), ("b", w.copy())], scaling, s=0.125, g=4, iters=3)
        plan = allocate_ranks(state, alpha=0.5, sparse_ratio=0.125, g=4, b=4)
        ra, rb = plan.layers[0].r, plan.layers[1].r
        assert abs(ra - rb) <= 2 * 2 * 4  # within one batch step unit (2b at most, x2 slack)

    def test_infeasible_at_ten_percent_floor(self):
        # budget clears the sparse component but not the 10% starting ranks
        layers, scaling = random_layers(4, 2, m=16, n=16)
        state = prepare_full_rank(layers, scaling, s=0.125, g=4, iters=2)
        with pytest.raises(ValueError, match="infeasible"):
            allocate_ranks(state, alpha=0.8, sparse_ratio=0.125, g=4, b=2)

    def test_infeasible_sparse_alone(self):
        layers, scaling = random_layers(4, 2, m=16, n=16)
        state = prepare_full_rank(layers, scaling, s=0.125, g=4, iters=2)
        with pytest.raises(ValueError, match="violates"):
            allocate_ranks(state, alpha=0.999, sparse_ratio=0.125, g=4, b=2)

    def test_planted_heterogeneous_ranks(self):
        low_ranks = [4, 4, 4] + [32] * 9
        layers, scaling = planted_rank_layers(5, low_ranks)
        state = prepare_full_rank(layers, scaling, s=0.125, g=4, iters=4)
        plan = allocate_ranks(state, alpha=0.5, sparse_ratio=0.125, g=4, b=4)
        low_rank_assigned = [plan.layers[i].r for i in range(3)]
        rest = [plan.layers[i].r for i in range(3, 12)]
        assert max(low_rank_assigned) * 2 <= min(rest)
        assert Fraction(plan.psi_achieved) >= 0  # sanity
        assert psi(plan) >= 0.5

    def test_ranks_non_decreasing_and_budget_safe(self):
        layers, scaling = random_layers(6, 5, m=24, n=40)
        state = prepare_full_rank(layers, scaling, s=0.125, g=4, iters=3)
        plan = allocate_ranks(state, alpha=0.4, sparse_ratio=0.125, g=4, b=3)
        trace = np.array(plan.rank_trace)
        assert np.all(np.diff(trace, axis=0) >= 0)
        assert psi(plan) >= 0.4

    def test_deterministic(self):
        for _ in range(2):
            layers, scaling = random_layers(7, 4)
            state = prepare_full_rank(layers, scaling, s=0.125, g=4, iters=3)
            plan = allocate_ranks(state, alpha=0.45, sparse_ratio=0.125, g=4, b=4)
            ranks = tuple(pl.r for pl in plan.layers)
            if _ == 0:
                first = ranks
        assert ranks == first


class TestPsi:
    def test_hand_count(self):
        plan = CompressionPlan(
            alpha=0.2, sparse_ratio=0.25,
            layers=[PlanLayer("l", 4, 4, 1, 1, 2, 12)],
            psi_achieved=0.0, iterations=0,
        )
        assert psi(plan) == 0.25  # 1 - (8 + 4) / 16

    def test_hypothetical_full_reduction(self):
        plan = CompressionPlan(
            alpha=0.2, sparse_ratio=0.25,
            layers=[PlanLayer("l", 8, 8, 0, 0, 2, 0)],
            psi_achieved=0.0, iterations=0,
        )
        assert psi(plan) == 1.0

    def test_max_rank_break_even(self):
        assert max_rank(64, 96) == (64 * 96) // 160
        assert max_rank(1, 1) == 1


def test_budget_model_rejects_sparse_overrun():
    with pytest.raises(ValueError, match="sparse"):
        BudgetModel(alpha=0.9, original_params=1000, sparse_params=900)
