import math

import numpy as np
import pytest

from obbstack.clustering import Cluster
from obbstack.errors import (
    CalibrationError,
    ContractError,
    ConvergenceWarning,
    DegenerateDataError,
    SchemaError,
)
from obbstack.geometry import canonicalize
from obbstack.ingest import Detection, DetectionRun, GroundTruth, GroundTruthObject, score_to_logit
from obbstack.metalearner import (
    CalibrationParams,
    LabeledCluster,
    MetaLearner,
    decompose_weights,
    fit,
    fit_temperature,
    label_clusters,
    nll,
    read_meta_json,
    score_correlation,
    sigma_wa,
    write_meta_json,
)

from oracles import grid_search_nll, numeric_gradient


def make_learner(weights, intercept, lam=0.0, z_miss=-8.0):
    return MetaLearner(
        models=[f"m{i}" for i in range(len(weights))],
        weights=list(weights),
        intercept=intercept,
        z_miss=z_miss,
        lam=lam,
    )


def bernoulli_samples(rng, n, temperature, spread=3.0, shift=0.0):
    """y ~ Bernoulli(sigma(z / T + shift)) with z ~ N(0, spread^2)."""
    z = rng.normal(0.0, spread, size=n)
    p = 1.0 / (1.0 + np.exp(-(z / temperature + shift)))
    y = (rng.random(n) < p).astype(int)
    return [LabeledCluster(features=[float(zi)], label=int(yi)) for zi, yi in zip(z, y)]


class TestSigmaWa:
    def test_zero_input(self):
        learner = make_learner([0.7, -0.3, 2.0], 0.0)
        assert sigma_wa([0.0, 0.0, 0.0], learner) == 0.5

    def test_single_model_ln3(self):
        learner = make_learner([1.0], 0.0)
        assert sigma_wa([math.log(3.0)], learner) == pytest.approx(0.75, abs=1e-12)

    def test_published_collection1_weights(self):
        # w entries are the first two fitted weights reported for the
        # OR-CNN/ReDet/Swin collection; sigma(0.91) computed directly.
        learner = make_learner([0.57, 0.34], 0.0)
        expected = 1.0 / (1.0 + math.exp(-0.91))
        assert sigma_wa([1.0, 1.0], learner) == pytest.approx(expected, abs=1e-12)
        assert sigma_wa([1.0, 1.0], learner) == pytest.approx(0.7130002, abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            sigma_wa([1.0], make_learner([0.5, 0.5], 0.0))

    def test_overflow_safe(self):
        learner = make_learner([1.0], 0.0)
        assert sigma_wa([1000.0], learner) == 1.0
        assert sigma_wa([-1000.0], learner) == pytest.approx(0.0, abs=1e-300)

    def test_monotone_in_positive_weight_coordinates(self, rng):
        learner = make_learner([0.8, 1.7], 0.3)
        for _ in range(100):
            z = list(rng.normal(size=2))
            for k in range(2):
                bumped = list(z)
                bumped[k] += 0.5
                assert sigma_wa(bumped, learner) > sigma_wa(z, learner)


def _cluster_at(x, score, model=1, image_id="I0", category="c"):
    return Cluster(
        center=Detection(
            obb=canonicalize(x, 0.0, 4.0, 2.0, 0.0),
            score=score,
            logit=score_to_logit(score),
            model_index=model,
            category=category,
            image_id=image_id,
        )
    )


class TestLabelClusters:
    def _gt(self, x=0.0):
        return GroundTruth(
            objects=[
                GroundTruthObject(
                    obb=canonicalize(x, 0.0, 4.0, 2.0, 0.0),
                    category="c",
                    difficult=False,
                    image_id="I0",
                )
            ]
        )

    def test_exact_match_positive(self):
        labeled = label_clusters([_cluster_at(0.0, 0.9)], self._gt(), 0.5, 1, -8.0)
        assert labeled[0].label == 1

    def test_disjoint_negative(self):
        labeled = label_clusters([_cluster_at(50.0, 0.9)], self._gt(), 0.5, 1, -8.0)
        assert labeled[0].label == 0

    def test_boundary_is_inclusive(self):
        # IoU(center shifted by 4/3) = (4 - 4/3)/(8 + 4/3... ) computed: offset
        # x gives IoU exactly 0.5 at x = 4/3.
        from obbstack.geometry import iou

        cluster = _cluster_at(4.0 / 3.0, 0.9)
        overlap = iou(cluster.center.obb, self._gt().objects[0].obb)
        assert overlap == pytest.approx(0.5, abs=1e-12)
        labeled = label_clusters([cluster], self._gt(), 0.5, 1, -8.0)
        assert labeled[0].label == (1 if overlap >= 0.5 else 0)

    def test_below_threshold_negative(self):
        cluster = _cluster_at(1.4, 0.9)
        labeled = label_clusters([cluster], self._gt(), 0.5, 1, -8.0)
        assert labeled[0].label == 0

    def test_non_exclusive_labels(self):
        clusters = [_cluster_at(0.0, 0.9), _cluster_at(0.1, 0.8, model=2)]
        labeled = label_clusters(clusters, self._gt(), 0.5, 2, -8.0)
        assert [lc.label for lc in labeled] == [1, 1]


class TestNll:
    def test_single_sample_at_zero(self):
        learner = make_learner([0.37], 0.0)
        labeled = [LabeledCluster(features=[0.0], label=1)]
        assert nll(learner, labeled) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_prediction_limit(self):
        learner = make_learner([1.0], 0.0)
        labeled = [LabeledCluster(features=[27.6], label=1)]  # sigma -> 1 - 1e-12
        assert nll(learner, labeled) == pytest.approx(0.0, abs=1e-11)

    def test_symmetric_pair_closed_form(self, rng):
        for _ in range(20):
            a = float(rng.uniform(0.2, 4.0))
            learner = make_learner([1.0], 0.0)
            labeled = [
                LabeledCluster(features=[a], label=1),
                LabeledCluster(features=[-a], label=0),
            ]
            assert nll(learner, labeled) == pytest.approx(2.0 * math.log1p(math.exp(-a)), rel=1e-12)

    def test_regularizer_term(self):
        learner = make_learner([2.0, -1.0], 0.0, lam=0.5)
        labeled = [LabeledCluster(features=[0.0, 0.0], label=1)]
        assert nll(learner, labeled) == pytest.approx(math.log(2.0) + 0.25 * 5.0, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            nll(make_learner([1.0], 0.0), [])

    def test_gradient_matches_finite_differences(self, rng):
        from obbstack.metalearner import _design_matrix, _nll_grad, _nll_value

        labeled = [
            LabeledCluster(features=list(rng.normal(size=3)), label=int(rng.random() < 0.5))
            for _ in range(200)
        ]
        Z, y = _design_matrix(labeled)
        lam = 1e-3
        worst = 0.0
        for _ in range(100):
            theta = rng.normal(scale=1.5, size=4)
            gw, gb, _ = _nll_grad(Z, y, theta[:3], float(theta[3]), lam)
            analytic = np.concatenate([gw, [gb]])
            fd = numeric_gradient(
                lambda t: _nll_value(Z, y, t[:3], float(t[3]), lam), theta, h=1e-5
            )
            rel = np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), 1.0))
            worst = max(worst, float(rel))
        assert worst <= 1e-6

    def test_midpoint_convexity(self, rng):
        from obbstack.metalearner import _design_matrix, _nll_value

        labeled = [
            LabeledCluster(features=list(rng.normal(size=2)), label=int(rng.random() < 0.5))
            for _ in range(100)
        ]
        Z, y = _design_matrix(labeled)
        for _ in range(200):
            t1 = rng.normal(scale=2.0, size=3)
            t2 = rng.normal(scale=2.0, size=3)
            mid = 0.5 * (t1 + t2)
            lhs = _nll_value(Z, y, mid[:2], float(mid[2]), 1e-6)
            rhs = 0.5 * (
                _nll_value(Z, y, t1[:2], float(t1[2]), 1e-6)
                + _nll_value(Z, y, t2[:2], float(t2[2]), 1e-6)
            )
            assert lhs <= rhs + 1e-9


class TestFit:
    def test_recovers_known_temperature(self):
        rng = np.random.default_rng(7)
        labeled = bernoulli_samples(rng, 50_000, temperature=2.5)
        learner = fit(labeled, ["m0"], lam=1e-6)
        assert learner.weights[0] == pytest.approx(0.4, rel=0.02)
        assert abs(learner.intercept) < 0.02
        assert learner.training_meta["converged"]

    def test_grid_search_agrees(self):
        rng = np.random.default_rng(11)
        labeled = bernoulli_samples(rng, 5_000, temperature=2.5)
        learner = fit(labeled, ["m0"], lam=1e-6)
        z = [lc.features[0] for lc in labeled]
        y = [lc.label for lc in labeled]
        w_grid = np.linspace(0.25, 0.55, 400)
        b_grid = np.linspace(-0.15, 0.15, 400)
        w_star, b_star, _ = grid_search_nll(z, y, w_grid, b_grid, lam=1e-6)
        cell_w = w_grid[1] - w_grid[0]
        cell_b = b_grid[1] - b_grid[0]
        assert abs(learner.weights[0] - w_star) <= cell_w + 1e-12
        assert abs(learner.intercept - b_star) <= cell_b + 1e-12

    def test_separable_data_stays_finite(self):
        labeled = [
            LabeledCluster(features=[z], label=1) for z in (1.0, 2.0, 3.0)
        ] + [
            LabeledCluster(features=[z], label=0) for z in (-1.0, -2.0, -3.0)
        ]
        learner = fit(labeled, ["m0"], lam=1e-4)
        assert math.isfinite(learner.weights[0]) and learner.training_meta["converged"]
        # Regularized optimum is bounded; an unregularized one can run away.
        assert learner.weights[0] < 100.0

    def test_iteration_cap_warns_and_returns(self):
        rng = np.random.default_rng(13)
        labeled = bernoulli_samples(rng, 2000, temperature=2.5)
        with pytest.warns(ConvergenceWarning):
            learner = fit(labeled, ["m0"], lam=1e-6, max_iter=2)
        assert math.isfinite(learner.weights[0])
        assert not learner.training_meta["converged"]
        assert learner.training_meta["grad_norm"] > 1e-8

    def test_duplication_invariance(self):
        rng = np.random.default_rng(3)
        labeled = bernoulli_samples(rng, 400, temperature=1.5)
        a = fit(labeled, ["m0"], lam=0.0)
        b = fit(labeled + labeled, ["m0"], lam=0.0)
        assert b.weights[0] == pytest.approx(a.weights[0], abs=1e-6)
        assert b.intercept == pytest.approx(a.intercept, abs=1e-6)

    def test_single_class_rejected(self):
        labeled = [LabeledCluster(features=[1.0], label=1)] * 5
        with pytest.raises(DegenerateDataError):
            fit(labeled, ["m0"])

    def test_ranking_invariance_under_logit_scaling(self):
        rng = np.random.default_rng(5)
        n = 2000
        Z = rng.normal(size=(n, 2))
        u = 0.8 * Z[:, 0] + 0.5 * Z[:, 1]
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-u))).astype(int)
        base = [LabeledCluster(features=list(z), label=int(t)) for z, t in zip(Z, y)]
        scaled = [
            LabeledCluster(features=[z[0] * 4.0, z[1]], label=int(t)) for z, t in zip(Z, y)
        ]
        la = fit(base, ["m0", "m1"], lam=0.0)
        lb = fit(scaled, ["m0", "m1"], lam=0.0)
        assert lb.weights[0] == pytest.approx(la.weights[0] / 4.0, abs=1e-7)
        assert lb.weights[1] == pytest.approx(la.weights[1], abs=1e-7)
        assert lb.intercept == pytest.approx(la.intercept, abs=1e-7)
        for lc_a, lc_b in zip(base[:50], scaled[:50]):
            assert sigma_wa(lc_b.features, lb) == pytest.approx(
                sigma_wa(lc_a.features, la), abs=1e-8
            )


class TestFitTemperature:
    def test_recovers_t2(self):
        rng = np.random.default_rng(17)
        labeled = bernoulli_samples(rng, 20_000, temperature=2.0)
        samples = [(lc.features[0], lc.label) for lc in labeled]
        params = fit_temperature(samples)
        assert 1.9 <= params.temperature <= 2.1
        assert abs(params.shift) < 0.05

    def test_already_calibrated(self):
        rng = np.random.default_rng(23)
        labeled = bernoulli_samples(rng, 20_000, temperature=1.0)
        params = fit_temperature([(lc.features[0], lc.label) for lc in labeled])
        assert 0.95 <= params.temperature <= 1.05

    def test_published_weight_to_temperature(self):
        # The temperature implied by the published per-model slope 0.5690.
        assert 1.0 / 0.5690 == pytest.approx(1.7575, abs=2e-4)

    def test_anticorrelated_scores_rejected(self):
        rng = np.random.default_rng(29)
        z = rng.normal(0, 3, 4000)
        p = 1.0 / (1.0 + np.exp(z))  # decreasing in z
        y = (rng.random(4000) < p).astype(int)
        with pytest.raises(CalibrationError):
            fit_temperature(list(zip(z, y)))

    def test_equivalence_with_fit(self):
        rng = np.random.default_rng(31)
        labeled = bernoulli_samples(rng, 3000, temperature=1.7, shift=0.2)
        learner = fit(labeled, ["m0"], lam=1e-6)
        params = fit_temperature([(lc.features[0], lc.label) for lc in labeled], lam=1e-6)
        assert abs(learner.weights[0] - 1.0 / params.temperature) <= 1e-8
        assert abs(learner.intercept - params.shift) <= 1e-8


class TestDecomposeWeights:
    def test_identity(self):
        w = [0.3, 0.5]
        assert decompose_weights(w, [1.0, 1.0], [1.0, 1.0]) == pytest.approx(w)

    def test_published_swin_family_row1(self):
        g = decompose_weights([0.1705], [0.5028], [1.0])
        assert g[0] == pytest.approx(0.3390, abs=2e-3)

    def test_published_swin_family_row2(self):
        g = decompose_weights([0.2062], [0.5690], [1.0])
        assert g[0] == pytest.approx(0.3625, abs=2e-3)

    def test_zero_divisor(self):
        with pytest.raises(ContractError):
            decompose_weights([1.0], [0.0], [1.0])

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            decompose_weights([1.0, 2.0], [1.0], [1.0])


def _runs_and_clusters_from_scores(score_rows):
    """score_rows: list of per-cluster dicts model_index -> score."""
    clusters = []
    runs = {}
    for i, row in enumerate(score_rows):
        dets = []
        for model, score in sorted(row.items()):
            d = Detection(
                obb=canonicalize(10.0 * i, 0.0, 4.0, 2.0, 0.0),
                score=score,
                logit=score_to_logit(score),
                model_index=model,
                category="c",
                image_id="I0",
            )
            runs.setdefault(model, []).append(d)
            dets.append(d)
        cluster = Cluster(center=dets[0])
        cluster.members = dets[1:]
        clusters.append(cluster)
    run_objs = [DetectionRun(f"m{k}", k, v) for k, v in sorted(runs.items())]
    return run_objs, clusters


class TestScoreCorrelation:
    def test_self_copy_perfect(self, rng):
        rows = [{1: float(s), 2: float(s)} for s in rng.uniform(0.1, 0.9, 50)]
        runs, clusters = _runs_and_clusters_from_scores(rows)
        corr = score_correlation(runs, clusters)
        assert corr[0, 1] == pytest.approx(1.0, abs=1e-12)
        assert corr[0, 0] == 1.0

    def test_constant_scores_undefined(self):
        rows = [{1: 0.5, 2: float(s)} for s in (0.2, 0.4, 0.6, 0.8)]
        runs, clusters = _runs_and_clusters_from_scores(rows)
        corr = score_correlation(runs, clusters)
        assert math.isnan(corr[0, 1])

    def test_too_few_common_clusters_undefined(self):
        rows = [{1: 0.5, 2: 0.4}, {1: 0.6, 2: 0.7}, {1: 0.8}, {2: 0.9}]
        runs, clusters = _runs_and_clusters_from_scores(rows)
        corr = score_correlation(runs, clusters)
        assert math.isnan(corr[0, 1])

    def test_independent_scores_near_zero(self):
        rng = np.random.default_rng(41)
        rows = [
            {1: float(a), 2: float(b)}
            for a, b in zip(rng.uniform(0.05, 0.95, 10_000), rng.uniform(0.05, 0.95, 10_000))
        ]
        runs, clusters = _runs_and_clusters_from_scores(rows)
        corr = score_correlation(runs, clusters)
        assert abs(corr[0, 1]) < 0.05

    def test_symmetry_and_diagonal(self, rng):
        rows = [
            {1: float(rng.uniform(0.1, 0.9)), 2: float(rng.uniform(0.1, 0.9)), 3: float(rng.uniform(0.1, 0.9))}
            for _ in range(30)
        ]
        runs, clusters = _runs_and_clusters_from_scores(rows)
        corr = score_correlation(runs, clusters)
        assert np.allclose(corr, corr.T, equal_nan=True)
        assert np.all(np.diag(corr) == 1.0)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        learner = MetaLearner(
            models=["a", "b"],
            weights=[0.25, 0.5],
            intercept=-0.125,
            z_miss=-8.0,
            lam=1e-6,
            training_meta={"n_clusters": 10, "final_nll": 3.5, "iterations": 7,
                           "lambda": 1e-6, "grad_norm": 1e-9, "converged": True},
        )
        path = tmp_path / "meta.json"
        write_meta_json(learner, path)
        assert read_meta_json(path) == learner

    def test_unknown_schema(self, tmp_path):
        path = tmp_path / "meta.json"
        path.write_text('{"schema": "obbstack-meta/9", "models": [], "weights": []}')
        with pytest.raises(SchemaError):
            read_meta_json(path)

    def test_weight_length_checked(self):
        with pytest.raises(ContractError):
            MetaLearner(models=["a"], weights=[1.0, 2.0], intercept=0.0)
