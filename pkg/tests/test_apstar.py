import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmpf.apstar import APStarTrace, SolverError, read_trace_jsonl, run_apstar
from mmpf.core import APStarConfig, uniform_weights
from mmpf.starsets import StarSetSolver, sample_family
from mmpf.synthetic import GaussianPiecewiseSpec, OracleSolver, grid_search_minimax, group_risks


class ScriptedSolver:
    """Returns pre-set risk vectors in order and records the weights it was called with."""

    def __init__(self, risks):
        self.risks = [np.asarray(r, dtype=float) for r in risks]
        self.calls = []

    def __call__(self, mu):
        self.calls.append(mu.copy())
        return len(self.calls) - 1, self.risks[len(self.calls) - 1]


class TestRunApstar:
    def test_constant_oracle(self):
        trace = run_apstar(lambda mu: (None, np.full(3, 0.4)), uniform_weights(3),
                           APStarConfig(max_iterations=5))
        np.testing.assert_array_equal(trace.best_risks, [0.4, 0.4, 0.4])
        np.testing.assert_array_equal(trace.best_mu, uniform_weights(3))
        assert [r.improved for r in trace.records] == [True, False, False, False, False, False]

    def test_single_group_returns_immediately(self):
        solver = ScriptedSolver([[0.3]])
        trace = run_apstar(solver, [1.0])
        assert len(solver.calls) == 1
        assert trace.n_iterations == 0
        np.testing.assert_array_equal(trace.best_mu, [1.0])

    def test_default_start_is_uniform(self):
        solver = ScriptedSolver([[0.5, 0.5]] * 3)
        run_apstar(solver, n_groups=2, config=APStarConfig(max_iterations=2))
        np.testing.assert_array_equal(solver.calls[0], [0.5, 0.5])

    def test_mask_uses_running_best(self):
        # iteration 1 is worse than iteration 0, so its mask compares against 0.5, not 0.9
        solver = ScriptedSolver([[0.5, 0.2, 0.1], [0.9, 0.6, 0.1], [0.4, 0.4, 0.4]])
        run_apstar(solver, uniform_weights(3), APStarConfig(max_iterations=2))
        mu1 = solver.calls[1]
        mask = np.array([True, True, False])
        expected = (0.5 * mu1 + 0.5 / (2 * mask.sum()) * mask) * 2 / 1.5
        np.testing.assert_allclose(solver.calls[2], expected, atol=1e-15)

    def test_k_resets_only_on_strict_improvement(self):
        risks = [[0.5, 0.4], [0.6, 0.4], [0.6, 0.4], [0.45, 0.4], [0.45, 0.4], [0.3, 0.3]]
        trace = run_apstar(ScriptedSolver(risks), uniform_weights(2), APStarConfig(max_iterations=5, k_min=1))
        assert [r.k for r in trace.records] == [1, 2, 3, 1, 2, 1]
        assert [r.improved for r in trace.records] == [True, False, False, True, False, True]

    def test_k_min_caps_counter(self):
        risks = [[0.5, 0.4]] + [[0.6, 0.4]] * 4 + [[0.2, 0.1]]
        trace = run_apstar(ScriptedSolver(risks), uniform_weights(2), APStarConfig(max_iterations=5, k_min=3))
        assert trace.records[-1].k == 3

    def test_patience_stops_loop(self):
        trace = run_apstar(lambda mu: (None, [0.5, 0.5]), uniform_weights(2),
                           APStarConfig(max_iterations=100, patience_iters=7))
        assert trace.n_iterations == 7

    def test_solver_error_carries_iteration(self):
        def solver(mu):
            if mu[0] != 0.5:
                raise RuntimeError("boom")
            return None, [0.6, 0.4]

        with pytest.raises(SolverError) as err:
            run_apstar(solver, uniform_weights(2))
        assert err.value.iteration == 1

    def test_solver_wrong_length_is_error(self):
        with pytest.raises(SolverError):
            run_apstar(lambda mu: (None, [0.1, 0.2, 0.3]), uniform_weights(2))

    @settings(max_examples=40)
    @given(st.integers(0, 10_000), st.integers(2, 5))
    def test_invariants_with_random_risk_surface(self, seed, n):
        table = np.random.default_rng(seed).random((64, n))

        def solver(mu):
            return None, table[int(1e6 * mu[0]) % 64] + mu

        trace = run_apstar(solver, uniform_weights(n), APStarConfig(max_iterations=60, patience_iters=60))
        best = trace.best_minimax_history()
        assert np.all(np.diff(best) <= 0)
        assert trace.best_minimax == pytest.approx(min(r.minimax for r in trace.records))
        for rec in trace.records:
            assert np.all(rec.mu >= 0) and abs(rec.mu.sum() - 1) <= 1e-12

    def test_jsonl_round_trip(self, tmp_path):
        trace = run_apstar(ScriptedSolver([[0.5, 0.4], [0.3, 0.45], [0.2, 0.2]]), uniform_weights(2),
                           APStarConfig(max_iterations=2))
        path = tmp_path / "trace.jsonl"
        trace.write_jsonl(path)
        rows = read_trace_jsonl(path)
        assert [set(r) for r in rows] == [{"iter", "mu", "risks", "minimax", "k", "improved"}] * 3
        np.testing.assert_array_equal([r["minimax"] for r in rows], [0.5, 0.45, 0.2])
        assert isinstance(trace, APStarTrace)


class TestApstarOnOracles:
    def test_three_group_spec_matches_grid(self, three_group_spec):
        g_mu, g_r = grid_search_minimax(three_group_spec, "bs", 0.005)
        trace = run_apstar(OracleSolver(three_group_spec, "bs"), uniform_weights(3),
                           APStarConfig(max_iterations=500))
        assert abs(trace.best_minimax - g_r.max()) / g_r.max() < 0.01

    def test_two_group_equal_risk_point(self):
        spec = GaussianPiecewiseSpec(means=(-0.5, 0.5), thresholds=(-0.25, 0.25), low=(0.1, 0.1), high=(0.9, 0.8))

        def gap(m0):
            r = group_risks(spec, [m0, 1 - m0], "bs")
            return r[0] - r[1]

        lo, hi = 0.0, 1.0
        assert gap(lo) > 0 > gap(hi)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if gap(mid) > 0 else (lo, mid)
        equal_risk = group_risks(spec, [lo, 1 - lo], "bs").max()
        trace = run_apstar(OracleSolver(spec, "bs"), uniform_weights(2), APStarConfig(max_iterations=500))
        assert trace.best_minimax == pytest.approx(equal_risk, abs=1e-3)

    def test_star_set_surrogate_ends_in_intersection(self):
        family = sample_family(3)
        start = np.array([0.9, 0.05, 0.05])
        trace = run_apstar(StarSetSolver(family), start,
                           APStarConfig(max_iterations=10_000, patience_iters=10_000))
        assert family.in_all(trace.best_mu)
        assert trace.best_minimax == 0.0
