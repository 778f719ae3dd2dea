import math

import numpy as np
import pytest

from dualbind import data, metrics, model


def brute_pearson(a, b):
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    num = sum((a[i] - ma) * (b[i] - mb) for i in range(n))
    va = sum((a[i] - ma) ** 2 for i in range(n))
    vb = sum((b[i] - mb) ** 2 for i in range(n))
    return num / math.sqrt(va * vb)


def brute_ranks(x):
    """rank = 1 + (number smaller) + half the number of other equals."""
    out = []
    for i, xi in enumerate(x):
        smaller = sum(1 for xj in x if xj < xi)
        equal = sum(1 for j, xj in enumerate(x) if xj == xi and j != i)
        out.append(1.0 + smaller + 0.5 * equal)
    return out


def tied_data(n=300, seed=0):
    rng = np.random.default_rng(seed)
    a = np.round(rng.standard_normal(n), 1)  # coarse grid forces ties
    b = np.round(0.6 * a + 0.8 * rng.standard_normal(n), 1)
    return a, b


class TestCorrelations:
    def test_pearson_matches_brute_force(self):
        a, b = tied_data()
        assert metrics.pearson(a, b) == pytest.approx(
            brute_pearson(list(a), list(b)), abs=1e-12)

    def test_average_ranks_match_brute_force(self):
        a, _ = tied_data(seed=1)
        np.testing.assert_allclose(metrics.average_ranks(a), brute_ranks(list(a)),
                                   atol=1e-12)

    def test_average_ranks_simple_cases(self):
        np.testing.assert_array_equal(metrics.average_ranks([1.0, 2.0, 2.0, 3.0]),
                                      [1.0, 2.5, 2.5, 4.0])
        np.testing.assert_array_equal(metrics.average_ranks([5.0, 5.0, 5.0]),
                                      [2.0, 2.0, 2.0])

    def test_spearman_matches_brute_force(self):
        a, b = tied_data(seed=2)
        brute = brute_pearson(brute_ranks(list(a)), brute_ranks(list(b)))
        assert metrics.spearman(a, b) == pytest.approx(brute, abs=1e-12)

    def test_spearman_ignores_monotone_transforms(self):
        a, b = tied_data(seed=3)
        assert metrics.spearman(np.exp(a), b) == pytest.approx(
            metrics.spearman(a, b), abs=1e-12)

    def test_perfect_linear_relation(self):
        a = np.arange(20.0)
        assert metrics.pearson(a, 2 * a + 1) == pytest.approx(1.0, abs=1e-12)
        assert metrics.spearman(a, 2 * a + 1) == pytest.approx(1.0, abs=1e-12)
        assert metrics.pearson(a, -a) == pytest.approx(-1.0, abs=1e-12)

    def test_constant_input_is_nan(self):
        y = np.arange(5.0)
        assert math.isnan(metrics.pearson(np.ones(5), y))
        assert math.isnan(metrics.spearman(np.ones(5), y))

    def test_input_validation(self):
        with pytest.raises(metrics.MetricsError):
            metrics.pearson(np.ones(1), np.ones(1))
        with pytest.raises(metrics.MetricsError):
            metrics.pearson(np.ones(3), np.ones(4))


class TestPointMetrics:
    def test_rmse_hand_value(self):
        assert metrics.rmse([1.0, 2.0], [2.0, 4.0]) == pytest.approx(
            math.sqrt((1 + 4) / 2), abs=1e-15)

    def test_r_squared_endpoints(self):
        y = np.array([1.0, 2.0, 4.0])
        assert metrics.r_squared(y, y) == 1.0
        assert metrics.r_squared(np.full(3, y.mean()), y) == 0.0
        assert math.isnan(metrics.r_squared(y, np.ones(3)))

    def test_compute_metrics_bundle(self):
        a, b = tied_data(seed=4)
        m = metrics.compute_metrics(a, b)
        assert set(m) == set(metrics.METRIC_NAMES)
        assert m["n"] == a.size
        assert m["rmse"] == metrics.rmse(a, b)
        assert m["pearson"] == metrics.pearson(a, b)
        assert m["spearman"] == metrics.spearman(a, b)
        assert m["r2"] == metrics.r_squared(a, b)

    def test_compute_metrics_needs_two_points(self):
        with pytest.raises(metrics.MetricsError):
            metrics.compute_metrics(np.ones(1), np.ones(1))


class TestCapping:
    def test_weak_values_collapse(self):
        out = metrics.cap_predictions([-10.0, -3.0, -1.0, 4.0])
        np.testing.assert_array_equal(out, [-10.0, -3.0, -3.0, -3.0])

    def test_idempotent(self):
        x = np.linspace(-20, 10, 31)
        once = metrics.cap_predictions(x)
        np.testing.assert_array_equal(metrics.cap_predictions(once), once)

    def test_custom_threshold(self):
        np.testing.assert_array_equal(metrics.cap_predictions([0.0, -9.0], -5.0),
                                      [-5.0, -9.0])

    def test_nonfinite_threshold_rejected(self):
        with pytest.raises(metrics.MetricsError):
            metrics.cap_predictions([0.0], float("inf"))


def assert_same_metrics(a, b):
    assert a.keys() == b.keys()
    for k in a:
        if isinstance(a[k], float) and math.isnan(a[k]):
            assert math.isnan(b[k])
        else:
            assert a[k] == b[k]


def small_eval_setup(n=5, seed=17):
    cfg = data.SynthConfig(n_complexes=n, n_ligands=2, pocket_residues=3,
                           ligand_atoms=(6, 8), seed=seed)
    recs = data.cap_labels(data.synth_generate(cfg))
    mc = model.desk_config(width=16, layers=1, heads=2, rbf_bins=4, pocket_k=3)
    params = model.init_params(mc, seed=1)
    return recs, mc, params


class TestEvaluate:
    def test_rows_and_metrics_are_consistent(self):
        recs, mc, params = small_eval_setup()
        m, rows = metrics.evaluate(params, mc, recs)
        assert [r[0] for r in rows] == [rec.complex_id for rec in recs]
        for _, label, p, c in rows:
            assert c == min(p, data.CAP_THRESHOLD)
        again = metrics.compute_metrics(np.array([r[3] for r in rows]),
                                        np.array([r[1] for r in rows]))
        assert_same_metrics(m, again)

    def test_deterministic(self):
        recs, mc, params = small_eval_setup(seed=18)
        m1, rows1 = metrics.evaluate(params, mc, recs)
        m2, rows2 = metrics.evaluate(params, mc, recs)
        assert_same_metrics(m1, m2)
        assert rows1 == rows2

    def test_ligand_only_path(self):
        recs, mc, params = small_eval_setup(seed=19)
        m, rows = metrics.evaluate(params, mc, recs,
                                   energy_fn=model.ligand_only_energy)
        assert m["n"] == len(recs)
        assert all(np.isfinite(r[2]) for r in rows)

    def test_too_few_records(self):
        recs, mc, params = small_eval_setup(seed=20)
        with pytest.raises(metrics.MetricsError):
            metrics.evaluate(params, mc, recs[:1])


class TestCsv:
    def test_metrics_round_trip_exact(self, tmp_path):
        recs, mc, params = small_eval_setup(seed=21)
        m, _ = metrics.evaluate(params, mc, recs)
        p = tmp_path / "m.csv"
        metrics.write_metrics_csv(p, m)
        assert_same_metrics(metrics.read_metrics_csv(p), m)

    def test_metrics_header_enforced(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(metrics.MetricsError):
            metrics.read_metrics_csv(p)

    def test_predictions_file(self, tmp_path):
        rows = [("c1", -5.0, -4.25, -4.25), ("c2", -3.0, 0.125, -3.0)]
        p = tmp_path / "p.csv"
        metrics.write_predictions_csv(p, rows)
        lines = p.read_text().strip().splitlines()
        assert lines[0] == "complex_id,label,prediction,prediction_capped"
        assert lines[1].split(",") == ["c1", "-5.0", "-4.25", "-4.25"]
        got = [ln.split(",") for ln in lines[1:]]
        for (cid, label, pr, ca), row in zip(got, rows):
            assert (cid, float(label), float(pr), float(ca)) == row


class TestLatency:
    def test_reports_positive_times(self):
        recs, mc, params = small_eval_setup(seed=22)
        out = metrics.latency_bench(params, mc, recs, repeats=2)
        assert out["n"] == len(recs) and out["repeats"] == 2
        assert 0 < out["best_ms"] <= out["median_ms"]

    def test_empty_dataset_rejected(self):
        recs, mc, params = small_eval_setup(seed=23)
        with pytest.raises(metrics.MetricsError):
            metrics.latency_bench(params, mc, [])
