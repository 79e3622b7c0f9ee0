import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmpf.synthetic import (
    GaussianPiecewiseSpec, InfiniteRiskError, QuadratureConfig, ResourceLimitError, SineMixSpec, dump_spec,
    grid_search_minimax, group_densities, group_risks, is_mutually_nondominated, kl_between_group_marginals,
    lattice_size, load_spec, optimal_classifier, pareto_front_trace, posterior, quadrature_rule, risk_terms,
    sample_dataset, simplex_lattice, sine_mix_base, sine_mix_posteriors, two_group_tradeoff_spec, write_risk_csv,
)
from mmpf.core import dominates
from oracles import golden_section_min, pointwise_expected_loss

@st.composite
def specs(draw, n_groups=None):
    n = draw(st.integers(1, 4)) if n_groups is None else n_groups
    fl = st.floats(-2.0, 2.0)
    p = st.floats(0.02, 0.98)
    return GaussianPiecewiseSpec(
        means=[draw(fl) for _ in range(n)], thresholds=[draw(fl) for _ in range(n)],
        low=[draw(p) for _ in range(n)], high=[draw(p) for _ in range(n)],
    )


@st.composite
def spec_and_weights(draw):
    spec = draw(specs())
    raw = np.array([draw(st.floats(0.0, 1.0)) for _ in range(spec.n_groups)]) + 1e-3
    return spec, raw / raw.sum()


class TestPosterior:
    def test_threshold_belongs_to_low_plateau(self, three_group_spec):
        assert posterior(three_group_spec, 2, 0.25) == 0.1

    def test_above_threshold(self, three_group_spec):
        assert posterior(three_group_spec, 2, 0.26) == 0.8

    @given(st.floats(-50, 50), st.floats(0, 1))
    def test_constant_plateaus(self, x, c):
        spec = GaussianPiecewiseSpec(means=(0.0,), thresholds=(0.3,), low=(c,), high=(c,))
        assert posterior(spec, 0, x) == c

    def test_group_out_of_range(self, three_group_spec):
        with pytest.raises(IndexError):
            posterior(three_group_spec, 3, 0.0)

    @pytest.mark.parametrize("kwargs", [
        dict(means=(0.0,), thresholds=(0.0,), low=(1.2,), high=(0.5,)),
        dict(means=(0.0, 1.0), thresholds=(0.0,), low=(0.1, 0.1), high=(0.5, 0.5)),
        dict(means=(0.0, 1.0), thresholds=(0.0, 0.0), low=(0.1, 0.1), high=(0.5, 0.5), priors=(0.7, 0.7)),
    ])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(ValueError):
            GaussianPiecewiseSpec(**kwargs)


class TestOptimalClassifier:
    def test_tradeoff_midpoint(self, tradeoff_spec):
        assert optimal_classifier(tradeoff_spec, [0.5, 0.5], 0.0) == pytest.approx(0.375, abs=1e-15)

    @given(specs(), st.floats(-5, 5))
    def test_vertex_weights_give_group_posterior(self, spec, x):
        for a in range(spec.n_groups):
            mu = np.eye(spec.n_groups)[a]
            assert optimal_classifier(spec, mu, x) == pytest.approx(posterior(spec, a, x), abs=1e-15)

    @given(st.floats(-5, 5), st.floats(0.01, 0.99))
    def test_identical_groups_cancel(self, identical_spec, x, w):
        mu = np.array([w, (1 - w) / 2, (1 - w) / 2])
        assert optimal_classifier(identical_spec, mu, x) == pytest.approx(posterior(identical_spec, 0, x), abs=1e-15)

    @given(spec_and_weights(), st.floats(-6, 6))
    def test_convex_combination_of_posteriors(self, sw, x):
        spec, mu = sw
        f = spec.posteriors(np.array([x]))[:, 0]
        h = optimal_classifier(spec, mu, x)
        assert f.min() - 1e-15 <= h <= f.max() + 1e-15

    def test_vectorised_shape(self, three_group_spec):
        x = np.linspace(-1, 1, 12).reshape(3, 4)
        assert optimal_classifier(three_group_spec, [0.2, 0.3, 0.5], x).shape == (3, 4)

    @pytest.mark.parametrize("loss", ["bs", "ce"])
    def test_matches_pointwise_golden_section_on_atoms(self, loss):
        # 41-atom discrete X with renormalised Gaussian masses; the span is wide enough that every
        # group's normaliser is the same, otherwise renormalising would reweight the groups
        rng = np.random.default_rng(7)
        atoms = np.linspace(-12.0, 12.0, 41)
        for _ in range(5):
            n = int(rng.integers(2, 5))
            spec = GaussianPiecewiseSpec(means=rng.uniform(-1.5, 1.5, n), thresholds=rng.uniform(-1, 1, n),
                                         low=rng.uniform(0.05, 0.95, n), high=rng.uniform(0.05, 0.95, n))
            mass = group_densities(spec, atoms)
            mass = mass / mass.sum(axis=1, keepdims=True)
            f = spec.posteriors(atoms)
            for _ in range(10):
                mu = rng.dirichlet(np.ones(n))
                h = optimal_classifier(spec, mu, atoms)
                for j in range(atoms.size):
                    def objective(v, j=j):
                        return sum(mu[a] * mass[a, j] * pointwise_expected_loss(f[a, j], v, loss) for a in range(n))
                    best = golden_section_min(objective, 1e-12, 1 - 1e-12)
                    assert abs(best - h[j]) < 1e-6


class TestRisks:
    def test_quadrature_integrates_densities(self, three_group_spec):
        x, w = quadrature_rule(three_group_spec)
        np.testing.assert_allclose(group_densities(three_group_spec, x) @ w, 1.0, atol=1e-12)
        assert x.size == 2048

    @settings(max_examples=50)
    @given(spec_and_weights(), st.sampled_from(["bs", "ce"]))
    def test_decomposition_identity(self, sw, loss):
        spec, mu = sw
        terms = risk_terms(spec, mu, loss)
        assert np.all(terms.bayes >= 0) and np.all(terms.discrepancy >= 0)
        np.testing.assert_allclose(terms.total, terms.bayes + terms.discrepancy, rtol=0, atol=1e-8)

    @pytest.mark.parametrize("loss", ["bs", "ce"])
    def test_conditional_independence_gives_flat_risks(self, identical_spec, loss, rng):
        risks = np.array([group_risks(identical_spec, rng.dirichlet(np.ones(3)), loss) for _ in range(20)])
        assert np.ptp(risks, axis=0).max() < 1e-9
        assert np.ptp(risks[0]) < 1e-9

    def test_deterministic_identical_groups_have_zero_brier_risk(self):
        spec = GaussianPiecewiseSpec(means=(0.0, 0.0), thresholds=(0.2, 0.2), low=(0.0, 0.0), high=(1.0, 1.0))
        terms = risk_terms(spec, [0.3, 0.7], "bs")
        np.testing.assert_array_equal(terms.bayes, 0.0)
        np.testing.assert_allclose(terms.total, 0.0, atol=1e-15)
        np.testing.assert_allclose(terms.discrepancy, 0.0, atol=1e-15)

    @pytest.mark.parametrize("loss", ["bs", "ce"])
    def test_well_separated_groups_reach_bayes_risk(self, loss):
        spec = GaussianPiecewiseSpec(means=(-10.0, 0.0, 10.0), thresholds=(-10.25, 0.0, 10.25),
                                     low=(0.1, 0.1, 0.1), high=(0.9, 0.9, 0.8))
        assert risk_terms(spec, np.full(3, 1 / 3), loss).discrepancy.max() < 1e-4

    def test_infinite_cross_entropy_is_reported(self):
        spec = GaussianPiecewiseSpec(means=(0.0, 0.0), thresholds=(-0.5, 0.5), low=(0.0, 0.0), high=(1.0, 1.0))
        with pytest.raises(InfiniteRiskError):
            risk_terms(spec, [1.0, 0.0], "ce")

    def test_unknown_loss(self, three_group_spec):
        with pytest.raises(ValueError):
            group_risks(three_group_spec, np.full(3, 1 / 3), "hinge")

    @pytest.mark.slow
    @pytest.mark.parametrize("loss", ["bs", "ce"])
    def test_quadrature_matches_monte_carlo(self, three_group_spec, loss):
        mu = np.full(3, 1 / 3)
        ds = sample_dataset(three_group_spec, 1_000_000, seed=11)
        x = ds.features[:, 0]
        h = optimal_classifier(three_group_spec, mu, x)
        if loss == "bs":
            per = 2.0 * (ds.labels - h) ** 2
        else:
            per = -np.log(np.where(ds.labels == 1, h, 1 - h))
        expected = group_risks(three_group_spec, mu, loss)
        for a in range(3):
            sel = per[ds.groups == a]
            se = sel.std(ddof=1) / np.sqrt(sel.size)
            assert abs(sel.mean() - expected[a]) < 3 * se

    def test_finer_quadrature_agrees(self, three_group_spec):
        mu = [0.2, 0.5, 0.3]
        coarse = group_risks(three_group_spec, mu, "ce")
        fine = group_risks(three_group_spec, mu, "ce", QuadratureConfig(sigmas=10, nodes=8192, order=32))
        np.testing.assert_allclose(coarse, fine, atol=1e-12)

    def test_monotone_in_own_weight(self, tradeoff_spec):
        grid = np.linspace(0, 1, 101)
        r0 = np.array([group_risks(tradeoff_spec, [m, 1 - m], "bs")[0] for m in grid])
        assert np.all(np.diff(r0) <= 1e-15)


class TestGridSearch:
    def test_single_group(self):
        spec = GaussianPiecewiseSpec(means=(0.0,), thresholds=(0.0,), low=(0.2,), high=(0.6,))
        mu, r = grid_search_minimax(spec, "bs")
        np.testing.assert_array_equal(mu, [1.0])
        np.testing.assert_allclose(r, risk_terms(spec, [1.0]).bayes, atol=1e-15)

    def test_flat_landscape_breaks_ties_lexicographically(self, identical_spec):
        mu, _ = grid_search_minimax(identical_spec, "bs", 0.05)
        np.testing.assert_array_equal(mu, [0.0, 0.0, 1.0])

    def test_tradeoff_minimax_does_not_equalise(self, tradeoff_spec):
        mu, r = grid_search_minimax(tradeoff_spec, "bs")
        assert r[0] > r[1]
        np.testing.assert_array_equal(mu, [1.0, 0.0])

    def test_vertices_beat_the_minimax_on_their_own_group(self, three_group_spec):
        _, r = grid_search_minimax(three_group_spec, "bs", 0.02)
        for i in range(3):
            assert group_risks(three_group_spec, np.eye(3)[i], "bs")[i] < r.max()

    def test_resource_limit(self):
        spec = GaussianPiecewiseSpec(means=(0,) * 5, thresholds=(0,) * 5, low=(0.1,) * 5, high=(0.9,) * 5)
        with pytest.raises(ResourceLimitError):
            grid_search_minimax(spec, "bs", 0.005)

    def test_resolution_must_divide_one(self, tradeoff_spec):
        with pytest.raises(ValueError):
            grid_search_minimax(tradeoff_spec, "bs", 0.3)

    def test_lattice_is_lexicographic_and_complete(self):
        lat = simplex_lattice(3, 4)
        assert lat.shape[0] == lattice_size(3, 4) == 15
        assert [tuple(r) for r in lat] == sorted(tuple(r) for r in lat)
        np.testing.assert_allclose(lat.sum(axis=1), 1.0)


class TestParetoFront:
    def test_tradeoff_front_is_monotone(self, tradeoff_spec):
        rows = pareto_front_trace(tradeoff_spec, "bs", 101)
        assert len(rows) == 101
        mu0 = np.array([m[0] for m, _ in rows])
        r = np.array([r for _, r in rows])
        assert np.all(np.diff(mu0) > 0)
        assert np.all(np.diff(r[:, 0]) <= 1e-15) and np.all(np.diff(r[:, 1]) >= -1e-15)
        assert is_mutually_nondominated(r)
        assert not any(dominates(a, b) for a in r for b in r if a is not b and np.any(np.abs(a - b) > 1e-12))

    def test_identical_groups_collapse_to_utopia(self):
        spec = GaussianPiecewiseSpec(means=(0.3, 0.3), thresholds=(0.0, 0.0), low=(0.2, 0.2), high=(0.9, 0.9))
        r = np.array([r for _, r in pareto_front_trace(spec, "ce", 11)])
        assert np.ptp(r, axis=0).max() < 1e-12

    def test_requires_two_groups(self, three_group_spec):
        with pytest.raises(ValueError):
            pareto_front_trace(three_group_spec)


class TestSineMix:
    @pytest.mark.parametrize("m1, kl", [(0.0, 0.0), (1.0, 0.5), (2.0, 2.0)])
    def test_kl_formula(self, m1, kl):
        assert kl_between_group_marginals(SineMixSpec(offset=m1)) == kl

    def test_kl_needs_two_groups(self, three_group_spec):
        with pytest.raises(ValueError):
            kl_between_group_marginals(three_group_spec)

    def test_base_value_at_quarter(self):
        assert sine_mix_base(0.25) == pytest.approx(0.9)

    @given(st.floats(-5, 5))
    def test_no_flip_means_no_group_difference(self, x):
        mix = SineMixSpec(offset=1.0, flip=0.0)
        assert sine_mix_posteriors(mix, 1, x) == sine_mix_posteriors(mix, 0, x)

    def test_full_flip_inverts_rounded_label(self):
        mix = SineMixSpec(offset=0.5, flip=1.0)
        x = 0.25
        assert sine_mix_posteriors(mix, 0, x) == pytest.approx(0.9)
        assert sine_mix_posteriors(mix, 1, x) == 0.0
        x = -0.25
        assert sine_mix_posteriors(mix, 0, x) == pytest.approx(0.8)
        assert sine_mix_posteriors(mix, 1, x) == 0.0

    def test_round_half_up(self):
        mix = SineMixSpec(flip=1.0)
        assert mix.posteriors(np.array([-0.5]))[1, 0] == pytest.approx(0.0)

    @pytest.mark.parametrize("kwargs", [dict(offset=-1.0), dict(flip=1.5)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SineMixSpec(**kwargs)


class TestSampling:
    def test_group_frequencies_within_binomial_band(self, three_group_spec):
        n = 1_000_000
        ds = sample_dataset(three_group_spec, n, seed=3)
        freq = np.bincount(ds.groups, minlength=3) / n
        p = np.array(three_group_spec.priors)
        assert np.all(np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / n))

    def test_degenerate_labels(self):
        spec = GaussianPiecewiseSpec(means=(0.0, 1.0), thresholds=(0.0, 0.0), low=(1.0, 1.0), high=(1.0, 1.0))
        assert np.all(sample_dataset(spec, 500, seed=0).labels == 1)

    def test_same_seed_same_data(self, three_group_spec):
        a = sample_dataset(three_group_spec, 1000, seed=5)
        b = sample_dataset(three_group_spec, 1000, seed=5)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.groups, b.groups)

    def test_sine_mix_uses_even_priors(self):
        ds = sample_dataset(SineMixSpec(offset=1.0, flip=0.3), 20_000, seed=1)
        assert abs(ds.groups.mean() - 0.5) < 3 * np.sqrt(0.25 / 20_000)

    def test_rejects_empty(self, three_group_spec):
        with pytest.raises(ValueError):
            sample_dataset(three_group_spec, 0)


class TestSpecFiles:
    def test_round_trip(self, tmp_path, three_group_spec):
        path = tmp_path / "spec.txt"
        path.write_text(dump_spec(three_group_spec))
        assert load_spec(path) == three_group_spec

    def test_sine_mix_round_trip(self, tmp_path):
        path = tmp_path / "mix.txt"
        mix = SineMixSpec(offset=1.5, flip=0.2)
        path.write_text(dump_spec(mix))
        assert load_spec(path) == mix

    def test_missing_key(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("means = 0, 1\nthresholds = 0, 0\n")
        with pytest.raises(ValueError):
            load_spec(path)

    def test_risk_csv_header(self, tmp_path):
        path = tmp_path / "front.csv"
        write_risk_csv(pareto_front_trace(two_group_tradeoff_spec(), "bs", 5), path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["mu_0", "mu_1", "r_0", "r_1", "minimax"]
        assert len(rows) == 6
        assert float(rows[1][4]) == max(float(rows[1][2]), float(rows[1][3]))
