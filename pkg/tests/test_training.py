from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

import adrgnn.autodiff as ad
from adrgnn.autodiff import Tape, Variable, backward
from adrgnn.data import (DatasetBundle, TemporalDataset, generate_splits,
                         make_planted_partition, make_transport_task)
from adrgnn.graph import build_graph, erdos_renyi
from adrgnn.training import (GROUPS, AdamW, Metrics, TrainConfig, TrainingDiverged,
                             ablation_study, aggregate_metrics, classification_metrics,
                             depth_energy_study, evaluate, grid_search,
                             regression_metrics, sample_config,
                             train_node_classification, train_temporal, transport_fit)
from adrgnn.runtime import philox


def flat_cfg(**kwargs) -> TrainConfig:
    base = dict(
        lr={g: 1e-2 for g in GROUPS},
        weight_decay={g: 0.0 for g in GROUPS},
        dropout_io=0.0, dropout_hidden=0.0,
        epochs=60, patience=30, layers=2, hidden=8, h=1.0, seed=0)
    base.update(kwargs)
    return TrainConfig(**base)


def separable_bundle(seed=0, n=24) -> DatasetBundle:
    """Features alone identify the class: an MLP suffices."""
    gen = philox(seed)
    labels = np.array([i % 2 for i in range(n)])
    features = np.where(labels[:, None] == 1, 3.0, -3.0) + 0.1 * gen.standard_normal((n, 2))
    graph = erdos_renyi(n, 0.3, seed=seed)
    splits = generate_splits(n, (0.5, 0.25, 0.25), k=1, seed=seed, labels=labels,
                             stratified=True)
    return DatasetBundle(graph=graph, features=features, labels=labels,
                         splits=splits, name="separable")


class TestAdamW:
    def test_zero_gradient_zero_decay_no_motion(self):
        p = Variable(np.array([1.0, -2.0]), requires_grad=True, name="p")
        opt = AdamW({"g": [p]}, {"g": 0.1}, {"g": 0.0})
        opt.step()
        np.testing.assert_array_equal(p.value, [1.0, -2.0])

    def test_first_step_is_learning_rate(self):
        p = Variable(np.array([0.0]), requires_grad=True, name="p")
        opt = AdamW({"g": [p]}, {"g": 0.1}, {"g": 0.0})
        p.grad[...] = 1.0
        opt.step()
        assert p.value[0] == pytest.approx(-0.1, rel=1e-6)

    def test_decoupled_decay_shrinks_parameter(self):
        p = Variable(np.array([2.0]), requires_grad=True, name="p")
        opt = AdamW({"g": [p]}, {"g": 0.1}, {"g": 0.01})
        opt.step()
        assert p.value[0] == pytest.approx(2.0 * (1 - 0.1 * 0.01))

    def test_nonfinite_gradient_names_parameter(self):
        p = Variable(np.array([0.0]), requires_grad=True, name="theta.bad")
        opt = AdamW({"g": [p]}, {"g": 0.1}, {"g": 0.0})
        p.grad[...] = np.nan
        with pytest.raises(TrainingDiverged, match="theta.bad"):
            opt.step()

    def test_zero_grad_clears_all_groups(self):
        a = Variable(np.ones(2), requires_grad=True, name="a")
        b = Variable(np.ones(2), requires_grad=True, name="b")
        opt = AdamW({"x": [a], "y": [b]}, {"x": 0.1, "y": 0.1}, {"x": 0, "y": 0})
        a.grad[...] = 3.0
        b.grad[...] = 4.0
        opt.zero_grad()
        assert a.grad.max() == 0 and b.grad.max() == 0


class TestMetrics:
    def test_rmse_squares_to_mse(self):
        gen = philox(0)
        m = regression_metrics(gen.standard_normal((10, 2)), gen.standard_normal((10, 2)))
        assert m.rmse ** 2 == pytest.approx(m.mse, abs=1e-12)

    def test_mape_excludes_and_counts_zero_targets(self):
        pred = np.array([[1.0], [2.0], [3.0]])
        target = np.array([[0.0], [4.0], [6.0]])
        m = regression_metrics(pred, target)
        assert m.mape_excluded == 1
        assert m.mape == pytest.approx(0.5)

    def test_perfect_and_all_wrong_predictors(self):
        labels = np.array([0, 1, 0, 1])
        perfect = np.eye(2)[labels] * 10
        assert classification_metrics(perfect, labels, np.ones(4, bool)).accuracy == 1.0
        wrong = np.eye(2)[1 - labels] * 10
        assert classification_metrics(wrong, labels, np.ones(4, bool)).accuracy == 0.0

    def test_argmax_ties_take_lowest_class(self):
        logits = np.zeros((3, 4))
        m = classification_metrics(logits, np.zeros(3, dtype=int), np.ones(3, bool))
        assert m.accuracy == 1.0

    def test_roc_auc_perfect_ordering(self):
        logits = np.array([[0.0, 3.0], [0.0, 2.0], [2.0, 0.0], [3.0, 0.0]])
        labels = np.array([1, 1, 0, 0])
        m = classification_metrics(logits, labels, np.ones(4, bool))
        assert m.roc_auc == 1.0

    def test_aggregate_mean_std(self):
        summary = aggregate_metrics([Metrics(accuracy=0.8), Metrics(accuracy=0.6)])
        mean, std = summary["accuracy"]
        assert mean == pytest.approx(0.7) and std == pytest.approx(0.1)


class TestConfig:
    def test_round_trip(self):
        cfg = flat_cfg()
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"learning_rate": 0.1})

    def test_out_of_range_warns_not_raises(self, caplog):
        cfg = flat_cfg(layers=3)  # not a documented depth choice
        with caplog.at_level("WARNING"):
            problems = cfg.validate()
        assert problems and "layers" in problems[0]

    def test_strict_mode_raises(self):
        with pytest.raises(ValueError, match="outside allowed"):
            flat_cfg(h=2.0).validate(strict=True)


class TestNodeClassification:
    def test_separable_fixture_reaches_full_accuracy(self):
        result = train_node_classification(separable_bundle(), flat_cfg(epochs=200))
        assert result.metrics.accuracy == 1.0
        assert result.best_epoch < 200

    def test_initial_loss_near_log_n_classes(self):
        bundle = make_planted_partition(40, 4, 0.2, 0.05, feat_dim=6, noise=1.0, seed=3)
        from adrgnn.models import AdrGnnStatic
        model = AdrGnnStatic.init(6, 4, hidden=8, layers=2, h=1.0, seed=0)
        logits = model.forward(bundle.graph, bundle.features)
        loss = float(ad.cross_entropy(logits, bundle.labels, bundle.splits[0][0]).value)
        assert abs(loss - math.log(4)) / math.log(4) < 0.2

    def test_label_mask_invariance(self):
        """Perturbing a non-train node's label never changes the training
        loss (features may matter through message passing; labels cannot)."""
        bundle = separable_bundle(seed=5)
        train_mask = bundle.splits[0][0]
        from adrgnn.models import AdrGnnStatic
        model = AdrGnnStatic.init(2, 2, hidden=8, layers=2, h=1.0, seed=1)
        logits = model.forward(bundle.graph, bundle.features)
        base = float(ad.cross_entropy(logits, bundle.labels, train_mask).value)
        tampered = bundle.labels.copy()
        non_train = np.flatnonzero(~train_mask)
        tampered[non_train] = 1 - tampered[non_train]
        after = float(ad.cross_entropy(logits, tampered, train_mask).value)
        assert base == after

    def test_two_runs_identical(self):
        bundle = separable_bundle(seed=6)
        cfg = flat_cfg(epochs=30, dropout_io=0.2, dropout_hidden=0.2)
        a = train_node_classification(bundle, cfg)
        b = train_node_classification(bundle, cfg)
        assert a.metrics.accuracy == b.metrics.accuracy
        assert [h["train_loss"] for h in a.history] == [h["train_loss"] for h in b.history]

    def test_early_stopping_returns_logged_maximum(self):
        bundle = separable_bundle(seed=7)
        result = train_node_classification(bundle, flat_cfg(epochs=80, patience=15))
        logged_best = max(h["val_accuracy"] for h in result.history)
        assert result.val_metrics.accuracy == logged_best

    def test_empty_train_mask_rejected(self):
        bundle = separable_bundle(seed=8)
        n = bundle.graph.n_nodes
        bundle.splits = [(np.zeros(n, bool), np.ones(n, bool), np.zeros(n, bool))]
        with pytest.raises(ValueError, match="empty train mask"):
            train_node_classification(bundle, flat_cfg())

    def test_divergence_aborts_with_diagnostic(self):
        bundle = separable_bundle(seed=9)
        bundle.features = bundle.features * 1e150  # overflow quickly
        cfg = flat_cfg(epochs=10)
        cfg.lr = {g: 1e30 for g in GROUPS}
        with pytest.raises(TrainingDiverged):
            train_node_classification(bundle, cfg)

    def test_evaluate_deterministic(self):
        bundle = separable_bundle(seed=10)
        result = train_node_classification(bundle, flat_cfg(epochs=20))
        first = evaluate(result.model, bundle, 0, "test")
        second = evaluate(result.model, bundle, 0, "test")
        assert first.to_dict() == second.to_dict()


class TestTemporal:
    def test_constant_series_learned_to_high_accuracy(self):
        g = erdos_renyi(8, 0.5, seed=1)
        series = np.full((16, 8, 1), 2.0)
        ds = TemporalDataset(graph=g, series=series,
                             timestamps=np.arange(16, dtype=np.float64))
        cfg = flat_cfg(epochs=200, layers=1, hidden=4, loss="mse",
                       lr={g_: 0.05 for g_ in GROUPS})
        result = train_temporal(ds, cfg)
        assert result.metrics.mse <= 1e-4

    def test_too_short_series_rejected(self):
        g = erdos_renyi(4, 0.9, seed=2)
        ds = TemporalDataset(graph=g, series=np.zeros((6, 4, 1)),
                             timestamps=np.arange(6, dtype=np.float64),
                             tau_in=4, tau_out=1)
        # only two windows, all of them straddle the 90% boundary
        with pytest.raises(ValueError):
            train_temporal(ds, flat_cfg(epochs=2))

    def test_mae_loss_option(self):
        g = erdos_renyi(5, 0.8, seed=3)
        gen = philox(4)
        series = gen.standard_normal((30, 5, 1))
        ds = TemporalDataset(graph=g, series=series,
                             timestamps=np.arange(30, dtype=np.float64))
        result = train_temporal(ds, flat_cfg(epochs=2, layers=1, hidden=4, loss="mae"))
        assert result.metrics.mae is not None


class TestTransportFit:
    @pytest.fixture(scope="class")
    def task(self):
        return make_transport_task(5, 0.55, 2, seed=2)

    def test_advection_reaches_near_exact_fit(self, task):
        result = transport_fit(task, "A", layers=4, h=1.0, lr=0.05, epochs=800,
                               seed=0, channels=8)
        assert result.final_mse <= 1e-4

    def test_advection_conserves_mass_at_every_logged_step(self, task):
        result = transport_fit(task, "A", layers=4, h=1.0, lr=0.05, epochs=100,
                               seed=0, channels=8)
        for point in result.trace:
            assert point["mass"] == pytest.approx(1.0, abs=1e-9)

    def test_diffusion_and_reaction_cannot_fit(self, task):
        for terms in ("D", "R"):
            result = transport_fit(task, terms, layers=4, h=1.0, lr=0.05, epochs=300,
                                   seed=0, channels=8)
            assert result.final_mse >= 1e-2

    def test_reaction_preserves_equal_rows(self, task):
        """A pointwise-only model maps nodes with identical inputs to
        identical outputs, so their ranking can never change."""
        result = transport_fit(task, "R", layers=3, h=1.0, lr=0.05, epochs=50,
                               seed=0, channels=4)
        values = result.node_values[:, 0]
        zero_rows = np.flatnonzero(task.source_features[:, 0] == 0.0)
        assert np.ptp(values[zero_rows]) == 0.0


class TestStudies:
    @pytest.fixture(scope="class")
    def bundle(self):
        return make_planted_partition(36, 3, 0.35, 0.03, feat_dim=5, noise=0.8,
                                      seed=11, k_splits=2)

    def test_ablation_rows_and_order(self, bundle):
        cfg = flat_cfg(epochs=25, patience=25, layers=2, hidden=8)
        rows = ablation_study(bundle, ["A", "ADR"], cfg, split_indices=[0])
        assert [r["terms"] for r in rows] == ["A", "ADR"]
        assert all("accuracy" in r["summary"] for r in rows)

    def test_ablation_empty_subset_rejected(self, bundle):
        with pytest.raises(ValueError, match="empty"):
            ablation_study(bundle, [""], flat_cfg(epochs=1))

    def test_depth_energy_study_rows(self, bundle):
        cfg = flat_cfg(epochs=10, patience=10, layers=2, hidden=8)
        rows = depth_energy_study(bundle, [2], cfg)
        kinds = {r["model"] for r in rows}
        assert kinds == {"adr", "gcn"}
        for r in rows:
            assert r["relative_energy"][0] == pytest.approx(1.0)
            assert len(r["relative_energy"]) == 3  # embedding plus two layers

    def test_deep_convolution_oversmooths_where_adr_does_not(self):
        """Trained at depth 64 on a citation-like fixture, the convolution
        baseline's final-layer relative Dirichlet energy falls below 1e-2
        while the three-term model's stays above it (thresholds pinned from
        recorded runs of this fixture: 6.8e-4 vs 1.9e27)."""
        from adrgnn.graph import dirichlet_energy
        bundle = make_planted_partition(60, 3, 0.25, 0.03, feat_dim=8, noise=1.0, seed=7)
        cfg = flat_cfg(epochs=60, patience=60, layers=64, hidden=16)
        rows = depth_energy_study(bundle, [64], cfg)
        rel = {r["model"]: r["relative_energy"][-1] for r in rows}
        assert rel["gcn"] < 1e-2
        assert rel["adr"] >= 1e-2


class TestGridSearch:
    def test_budget_one_returns_single_config(self):
        bundle = separable_bundle(seed=12)
        best, trials = grid_search(bundle, 1, flat_cfg(epochs=5, patience=5), seed=0)
        assert len(trials) == 1
        assert best is not None

    def test_samples_inside_documented_ranges(self):
        base = flat_cfg()
        for trial in range(200):
            cfg = sample_config(philox(0, trial), base)
            assert all(1e-4 <= cfg.lr[g] <= 1e-1 for g in GROUPS)
            assert all(0.0 <= cfg.weight_decay[g] <= 1e-2 for g in GROUPS)
            assert 0.0 <= cfg.dropout_io <= 0.9
            assert 0.0 <= cfg.dropout_hidden <= 0.9
            assert 1e-3 <= cfg.h <= 1.0
            assert cfg.layers in (2, 4, 8, 16, 32, 64)
            assert cfg.hidden in (8, 16, 32, 64, 128, 256)

    def test_log_uniform_learning_rate_median(self):
        samples = [sample_config(philox(1, t), flat_cfg()).lr["advection"]
                   for t in range(10_000)]
        median = float(np.median(samples))
        assert 2e-3 <= median <= 5e-3  # geometric midpoint of [1e-4, 1e-1] ~ 3.16e-3

    def test_invalid_budget(self):
        with pytest.raises(ValueError, match="budget"):
            grid_search(separable_bundle(), 0, flat_cfg())
