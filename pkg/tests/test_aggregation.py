import functools
import itertools

import numpy as np
import pytest

from aggregation import (
    AggregationReport,
    LayerUpdateSet,
    active_set_min_norm,
    aggregate_bn_stats,
    aggregate_shared_layer,
    attention_aggregate,
    consensus_aggregate,
    min_norm_weights,
    settle_min_norm,
    weighted_average,
)
from errors import AggregationError, AlignmentError, ConfigError, NoClientsError


def _unit(rng, n, dim):
    d = rng.standard_normal((n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@functools.lru_cache(maxsize=None)
def _compositions(n, total):
    """Every way to write ``total`` as an ordered sum of ``n`` non-negative integers."""
    if n == 1:
        return np.array([[total]])
    if n == 2:
        first = np.arange(total + 1)
        return np.column_stack([first, total - first])
    return np.vstack([
        np.column_stack([np.full(len(rest), head), rest])
        for head in range(total + 1)
        for rest in [_compositions(n - 1, total - head)]
    ])


def _grid_minimum(directions, ticks):
    """Brute-force min of |sum u_k d_k|^2 over the simplex points with coordinates in multiples of 1/ticks."""
    u = _compositions(len(directions), ticks) / ticks
    return float(np.min(np.sum((u @ directions) ** 2, axis=1)))


def _conflicting_updates(rng, n, dim):
    """Client updates sharing one axis with random sign and scale, plus noise."""
    base = rng.standard_normal(dim)
    return [base * rng.uniform(-1.0, 1.0) + 0.3 * rng.standard_normal(dim) * rng.uniform(0.0, 1.0)
            for _ in range(n)]


# grid resolution per client count; the worst-case rounding error is (n / ticks)^2
GRID_TICKS = {3: 1000, 4: 100, 5: 50}


# ── Min-norm solver ─────────────────────────────────────────────────────────

class TestMinNorm:
    def test_single_direction(self):
        result = min_norm_weights([np.array([0.6, 0.8])])
        np.testing.assert_array_equal(result.weights.u, [1.0])
        assert result.objective == pytest.approx(1.0)

    def test_two_orthogonal_directions(self):
        result = min_norm_weights([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        np.testing.assert_allclose(result.weights.u, [0.5, 0.5])
        assert result.objective == pytest.approx(0.5)

    def test_two_point_closed_form_clips(self):
        d1 = np.array([1.0, 0.0])
        d2 = np.array([np.cos(0.1), np.sin(0.1)])
        result = min_norm_weights([d1, d2])
        assert np.all(result.weights.u >= 0) and result.weights.u.sum() == pytest.approx(1.0)
        assert result.objective <= 1.0

    def test_thousand_instances_against_the_grid(self):
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            n, dim = 2 + seed % 4, 2 + seed % 5
            d = _unit(rng, n, dim)
            result = settle_min_norm(d, min_norm_weights(d))
            result.weights.validate()
            if n == 2:
                gram = d @ d.T
                u1 = np.clip((gram[1, 1] - gram[0, 1]) / (gram[0, 0] + gram[1, 1] - 2 * gram[0, 1]), 0.0, 1.0)
                closed = float(np.sum((u1 * d[0] + (1 - u1) * d[1]) ** 2))
                assert result.objective == pytest.approx(closed, abs=1e-6), seed
                continue
            grid = _grid_minimum(d, GRID_TICKS[n])
            # a converged run is within its gap tolerance of the optimum
            assert result.objective <= grid + 2e-7, seed
            assert grid - result.objective <= (n / GRID_TICKS[n]) ** 2 + 1e-9, seed

    @pytest.mark.parametrize("n,dim", [(5, 8), (8, 20), (12, 30)])
    def test_optimality_conditions(self, n, dim):
        rng = np.random.default_rng(n * 100 + dim)
        d = _unit(rng, n, dim)
        result = min_norm_weights(d)
        u = result.weights.u
        grad = (d @ d.T) @ u
        value = float(u @ grad)
        assert value == pytest.approx(result.objective, abs=1e-12)
        # every vertex is at least as costly as the current point, to within the stopping tolerance
        assert np.all(grad >= value - 1e-6)
        # vertices holding real weight sit at the minimum
        assert np.all(grad[u > 1e-4] <= grad.min() + 1e-3)

    def test_trace_is_non_increasing(self, rng):
        result = min_norm_weights(_unit(rng, 10, 5))
        diffs = np.diff(result.trace)
        assert np.all(diffs <= 1e-12)
        assert result.trace[0] >= result.objective - 1e-12

    def test_directions_must_be_unit(self):
        with pytest.raises(AggregationError):
            min_norm_weights([np.array([2.0, 0.0]), np.array([0.0, 1.0])])

    def test_empty(self):
        with pytest.raises(NoClientsError):
            min_norm_weights([])

    def test_active_set_agrees_with_frank_wolfe(self):
        for seed in range(200):
            rng = np.random.default_rng(seed)
            d = _unit(rng, 3 + seed % 4, 2 + seed % 6)
            exact = active_set_min_norm(d)
            fw = min_norm_weights(d, max_iter=20000)
            exact.weights.validate()
            assert exact.solver == "active_set" and exact.converged
            assert exact.objective <= fw.objective + 1e-12, seed
            if fw.converged:
                assert fw.objective - exact.objective <= 2e-7, seed

    def test_active_set_reaches_zero_when_the_origin_is_enclosed(self):
        d = np.array([[1.0, 0.0], [-0.5, np.sqrt(3) / 2], [-0.5, -np.sqrt(3) / 2]])
        result = active_set_min_norm(d)
        assert result.objective < 1e-20
        np.testing.assert_allclose(result.weights.u, 1 / 3, atol=1e-12)

    def test_stopped_run_is_resolved_exactly_for_few_clients(self, rng):
        d = _unit(rng, 5, 3)
        stopped = min_norm_weights(d, max_iter=1)
        stopped.converged = False
        settled = settle_min_norm(d, stopped)
        assert settled.solver == "active_set"
        assert settled.objective <= stopped.objective + 1e-12

    def test_stopped_run_continues_for_many_clients(self, rng):
        d = _unit(rng, 9, 4)
        stopped = min_norm_weights(d, max_iter=1)
        stopped.converged = False
        settled = settle_min_norm(d, stopped)
        assert settled.solver == "frank_wolfe"
        assert settled.converged or settled.lower_bound <= 1e-12
        assert settled.objective <= stopped.objective + 1e-12

    def test_converged_run_is_kept(self, rng):
        d = _unit(rng, 2, 3)
        result = min_norm_weights(d)
        assert settle_min_norm(d, result) is result


# ── Consensus ───────────────────────────────────────────────────────────────

class TestConsensus:
    def test_identical_updates_pass_through_exactly(self, rng):
        update = rng.standard_normal((3, 4)).astype(np.float32)
        deltas, (report,) = consensus_aggregate([{"w": update}] * 3, ["w"])
        np.testing.assert_array_equal(deltas["w"], update)
        assert deltas["w"].dtype == np.float32
        assert report.weights == pytest.approx([1 / 3] * 3)

    def test_never_points_against_a_client(self, rng):
        updates = [rng.standard_normal(10) for _ in range(6)]
        delta, report = aggregate_shared_layer(LayerUpdateSet.from_updates("w", updates))
        for u in updates:
            assert float(delta @ u) >= -1e-9
        assert report.min_dot() >= -1e-9

    def test_thousand_conflicting_instances_stay_conflict_free(self):
        dims = (3, 10, 100, 2000)
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            updates = _conflicting_updates(rng, 2 + seed % 5, dims[(seed // 5) % 4])
            delta, report = aggregate_shared_layer(LayerUpdateSet.from_updates("w", updates))
            assert report.min_dot() >= -1e-5, seed
            norm = np.linalg.norm(delta)
            for u in updates:
                assert norm == 0.0 or float(delta @ u) / (norm * np.linalg.norm(u)) >= -1e-5, seed

    @pytest.mark.parametrize("n", [4, 6, 9])
    def test_iteration_limit_never_yields_a_conflict(self, n):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            updates = _conflicting_updates(rng, n, 3)
            _, report = aggregate_shared_layer(LayerUpdateSet.from_updates("w", updates), max_iter=1)
            assert report.min_dot() >= -1e-5, seed

    def test_pairwise_dots_before_aggregation(self):
        updates = [np.array([1.0, 0.0]), np.zeros(2), np.array([-2.0, 0.0])]
        _, report = aggregate_shared_layer(LayerUpdateSet.from_updates("w", updates))
        np.testing.assert_allclose(report.pairwise_dots, [[1.0, 0.0, -1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 1.0]])
        assert report.null_consensus
        record = report.to_dict()
        assert record["pairwise_dots"] == report.pairwise_dots and record["solver"] == "frank_wolfe"

    def test_scale_covariance(self, rng):
        updates = [rng.standard_normal(7) for _ in range(4)]
        delta, _ = aggregate_shared_layer(LayerUpdateSet.from_updates("w", updates))
        doubled, _ = aggregate_shared_layer(LayerUpdateSet.from_updates("w", [2.0 * u for u in updates]))
        np.testing.assert_array_equal(doubled, 2.0 * delta)

    def test_rescaled_by_mean_norm(self):
        updates = [np.array([3.0, 0.0]), np.array([0.0, 1.0])]
        delta, report = aggregate_shared_layer(LayerUpdateSet.from_updates("w", updates))
        assert report.mean_norm == pytest.approx(2.0)
        np.testing.assert_allclose(delta, [1.0, 1.0])

    def test_zero_updates_are_excluded(self):
        updates = [np.array([1.0, 0.0]), np.zeros(2), np.array([0.0, 1.0])]
        delta, report = aggregate_shared_layer(LayerUpdateSet.from_updates("w", updates))
        assert report.included == [True, False, True]
        assert report.weights[1] == 0.0
        np.testing.assert_allclose(delta, [0.5, 0.5])

    def test_all_zero_updates(self):
        delta, report = aggregate_shared_layer(LayerUpdateSet.from_updates("w", [np.zeros(3)] * 2))
        np.testing.assert_array_equal(delta, 0.0)
        assert report.zero_update

    def test_cancelling_updates_give_null_consensus(self):
        delta, report = aggregate_shared_layer(LayerUpdateSet.from_updates("w", [np.array([1.0, 2.0]), np.array([-1.0, -2.0])]))
        np.testing.assert_array_equal(delta, 0.0)
        assert report.null_consensus

    def test_model_granularity_solves_one_problem(self, rng):
        updates = [{"a": rng.standard_normal(3), "b": rng.standard_normal((2, 2))} for _ in range(3)]
        deltas, reports = consensus_aggregate(updates, ["b", "a"], granularity="model")
        assert len(reports) == 1 and reports[0].name == "model"
        assert deltas["b"].shape == (2, 2)
        flat = np.concatenate([deltas["a"], deltas["b"].ravel()])
        for u in updates:
            assert float(flat @ np.concatenate([u["a"], u["b"].ravel()])) >= -1e-9

    def test_layer_granularity_reports_each_tensor(self, rng):
        updates = [{"a": rng.standard_normal(3), "b": rng.standard_normal(2)} for _ in range(3)]
        _, reports = consensus_aggregate(updates, ["b", "a"])
        assert [r.name for r in reports] == ["a", "b"]

    def test_unknown_granularity(self):
        with pytest.raises(ConfigError):
            consensus_aggregate([{"a": np.ones(2)}], ["a"], granularity="block")

    def test_misaligned_updates(self):
        with pytest.raises(AlignmentError):
            LayerUpdateSet.from_updates("w", [np.ones(3), np.ones(4)])

    def test_report_serializes(self, rng):
        updates = [{"a": rng.standard_normal(3)} for _ in range(3)]
        _, reports = consensus_aggregate(updates, ["a"])
        record = AggregationReport(1, reports).to_dict()
        assert record["round"] == 1 and record["layers"][0]["name"] == "a"


# ── Attention ───────────────────────────────────────────────────────────────

class TestAttention:
    def test_single_client_is_a_copy(self):
        p = np.arange(4.0)
        (out,), matrix = attention_aggregate([p])
        np.testing.assert_array_equal(out, p)
        assert out is not p
        np.testing.assert_array_equal(matrix.matrix, [[1.0]])

    def test_identical_clients_keep_their_values(self):
        p = np.array([1.0, -2.0, 0.5], dtype=np.float32)
        outputs, matrix = attention_aggregate([p, p.copy(), p.copy()])
        for out in outputs:
            np.testing.assert_array_equal(out, p)
        np.testing.assert_allclose(matrix.matrix, 1 / 3)

    def test_identical_inputs_are_returned_exactly_for_any_temperature(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            p = rng.standard_normal((2, 3)).astype(np.float32)
            outputs, _ = attention_aggregate([p.copy() for _ in range(1 + seed % 6)], tau=rng.uniform(1e-3, 10.0))
            for out in outputs:
                np.testing.assert_array_equal(out, p)
                assert out.dtype == np.float32

    def test_rows_are_convex_combinations(self, rng):
        params = [rng.standard_normal((2, 3)) for _ in range(4)]
        outputs, matrix = attention_aggregate(params, tau=0.5)
        matrix.validate()
        stacked = np.stack(params)
        for out in outputs:
            assert out.shape == (2, 3)
            assert np.all(out <= stacked.max(axis=0) + 1e-12)
            assert np.all(out >= stacked.min(axis=0) - 1e-12)

    def test_similar_clients_attend_to_each_other(self):
        a = np.array([1.0, 0.0, 0.0])
        b = np.array([0.9, 0.1, 0.0])
        c = np.array([0.0, 0.0, 1.0])
        _, matrix = attention_aggregate([a, b, c], tau=0.1)
        assert matrix.matrix[0, 1] > matrix.matrix[0, 2]
        assert matrix.matrix[2, 2] > matrix.matrix[2, 0]

    def test_small_temperature_keeps_orthogonal_clients_apart(self):
        params = [np.array([1.0, 0.0]), np.array([0.0, 2.0])]
        outputs, matrix = attention_aggregate(params, tau=0.001)
        np.testing.assert_array_equal(matrix.matrix, np.eye(2))
        np.testing.assert_array_equal(outputs[1], params[1])

    def test_large_temperature_tends_to_the_mean(self):
        params = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0])]
        outputs, _ = attention_aggregate(params, tau=1e6)
        for out in outputs:
            np.testing.assert_allclose(out, np.mean(params, axis=0), atol=1e-5)

    def test_zero_vector_client(self):
        params = [np.zeros(3), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])]
        outputs, matrix = attention_aggregate(params, tau=0.1)
        matrix.validate()
        assert matrix.zero_rows == [0]
        assert np.all(np.isfinite(outputs[0]))

    def test_invalid_temperature(self):
        with pytest.raises(ConfigError):
            attention_aggregate([np.ones(2), np.zeros(2)], tau=0.0)

    def test_misaligned_shapes(self):
        with pytest.raises(AlignmentError):
            attention_aggregate([np.ones(2), np.ones(3)])


# ── Averages and BN statistics ──────────────────────────────────────────────

class TestAverages:
    def test_weighted_average(self):
        out = weighted_average([np.array([0.0, 2.0]), np.array([4.0, 6.0])], [3, 1])
        np.testing.assert_allclose(out, [1.0, 3.0])

    def test_uniform_average_keeps_dtype(self):
        out = weighted_average([np.ones(2, dtype=np.float32), np.zeros(2, dtype=np.float32)])
        assert out.dtype == np.float32
        np.testing.assert_allclose(out, 0.5)

    @pytest.mark.parametrize("weights", [[0, 0], [1, -1], [1]])
    def test_invalid_weights(self, weights):
        with pytest.raises(AggregationError):
            weighted_average([np.ones(2), np.ones(2)], weights)

    def test_empty(self):
        with pytest.raises(NoClientsError):
            weighted_average([])

    def test_bn_stats_mean_and_local(self):
        clients = [
            {"b.bn_dfe.running_mean": np.array([0.0, 2.0]), "b.bn_dse.running_mean": np.array([5.0])},
            {"b.bn_dfe.running_mean": np.array([2.0, 4.0]), "b.bn_dse.running_mean": np.array([7.0])},
        ]
        global_stats, per_client = aggregate_bn_stats(clients, ["b.bn_dfe.running_mean"])
        np.testing.assert_allclose(global_stats["b.bn_dfe.running_mean"], [1.0, 3.0])
        assert per_client[0]["b.bn_dse.running_mean"] is clients[0]["b.bn_dse.running_mean"]
        np.testing.assert_allclose(per_client[1]["b.bn_dfe.running_mean"], [1.0, 3.0])

    def test_bn_stats_misaligned(self):
        with pytest.raises(AlignmentError):
            aggregate_bn_stats([{"a": np.ones(1)}, {"b": np.ones(1)}], ["a"])
