import numpy as np
import pytest

from esd.data import DatasetSplit, blob_spec, gen_synthetic
from esd.errors import DataError, EvalError
from esd.evaluation import (
    VARIANT_LABELS,
    EvalReport,
    ablate,
    evaluate,
    pca_2d,
    project_2d,
    top2_directions,
)
from esd.model import init_model
from esd.trainer import ABLATIONS, TrainConfig


def identity_model(K):
    """Every layer is the identity, so one-hot features classify as themselves."""
    m = init_model(K, K, 0, hidden=K)
    eye, zero = np.eye(K), np.zeros((1, K))
    for name in ("trunk", "head_di", "head_ds", "c_di"):
        m[name].tensors = [eye.copy(), zero.copy()]
    return m


def one_hot_split(K, labels):
    x = np.eye(K)[labels]
    return DatasetSplit(x, labels, x.copy(), K, target_labels=np.array(labels))


def test_oracle_model_scores_one():
    split = one_hot_split(4, [0, 1, 2, 3, 3, 2, 1, 0])
    report = evaluate(identity_model(4), split)
    assert report.target_accuracy == 1.0
    assert report.per_class_accuracy == [1.0] * 4
    assert report.mean_per_class == 1.0
    assert report.hard_agreement == 1.0


def test_absent_class_scores_zero():
    report = evaluate(identity_model(3), one_hot_split(3, [0, 1, 1, 0]))
    assert report.per_class_accuracy == [1.0, 1.0, 0.0]
    assert report.target_accuracy == 1.0
    assert report.mean_per_class == pytest.approx(2 / 3)


def test_random_init_near_chance():
    split = gen_synthetic(blob_spec(K=4, d=12, n_per_class=100, seed=8))
    accs = [evaluate(init_model(12, 4, seed, hidden=16), split).target_accuracy for seed in range(10)]
    assert abs(np.mean(accs) - 0.25) <= 0.1


def test_per_class_length_and_purity(small_model, small_split):
    split = small_split
    before = [t.tobytes() for g in small_model.param_groups() for t in g.tensors]
    a, b = evaluate(small_model, split), evaluate(small_model, split)
    assert len(a.per_class_accuracy) == 3
    assert a == b
    assert [t.tobytes() for g in small_model.param_groups() for t in g.tensors] == before


def test_discriminator_threshold():
    m = identity_model(2)
    m["c_ds"].tensors = [np.zeros((2, 1)), np.zeros((1, 1))]  # p = 0.5 everywhere: all called source
    split = one_hot_split(2, [0, 1])
    assert evaluate(m, split).discriminator_accuracy == 0.5


def test_missing_target_labels(small_model):
    split = DatasetSplit(np.zeros((3, 16)), [0, 1, 2], np.zeros((3, 16)), 3)
    with pytest.raises(EvalError):
        evaluate(small_model, split)


def test_report_text_round_trip(small_model, small_split):
    report = evaluate(small_model, small_split)
    assert EvalReport.from_text(report.to_text()) == report
    assert "target_accuracy = " in report.to_text()


# ---- ablation ----

def test_ablation_rows_and_determinism():
    split = gen_synthetic(blob_spec(K=3, d=8, n_per_class=12, seed=1))
    cfg = TrainConfig(hidden=4, batch_size=8, iterations=3, lr=0.05)
    a = ablate(split, cfg, [0, 1, 2])
    b = ablate(split, cfg, [0, 1, 2])
    assert [r.variant for r in a.rows] == list(ABLATIONS)
    assert [r.label for r in a.rows] == [VARIANT_LABELS[v] for v in ABLATIONS]
    assert a.to_csv() == b.to_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == "variant,mean_acc,std_acc,seed_0,seed_1,seed_2"
    assert len(lines) == 5
    row = a.row("full")
    assert row.std_acc == pytest.approx(np.std(row.accuracies, ddof=1))


def test_ablation_parallel_matches_serial():
    split = gen_synthetic(blob_spec(K=3, d=8, n_per_class=12, seed=1))
    cfg = TrainConfig(hidden=4, batch_size=8, iterations=3, lr=0.05)
    assert ablate(split, cfg, [0, 1, 2], workers=2).to_csv() == ablate(split, cfg, [0, 1, 2]).to_csv()


def test_ablation_needs_three_seeds():
    split = gen_synthetic(blob_spec(K=3, d=8, n_per_class=12, seed=1))
    with pytest.raises(Exception):
        ablate(split, TrainConfig(hidden=4, batch_size=8, iterations=1), [0, 1])


# ---- projection ----

def test_top2_matches_eigh(rng):
    for _ in range(20):
        a = rng.normal(size=(50, 10)) * rng.uniform(0.2, 3.0, size=10)
        cov = np.cov(a, rowvar=False, bias=True)
        vals, vecs = top2_directions(cov)
        ref = np.linalg.eigh(cov)[0][::-1][:2]
        np.testing.assert_allclose(vals, ref, rtol=1e-9)
        np.testing.assert_allclose(vecs.T @ vecs, np.eye(2), atol=1e-10)


def test_projected_variance_is_top_two_eigenvalues(rng):
    x = rng.normal(size=(200, 12)) @ rng.normal(size=(12, 12))
    coords = pca_2d(x)
    centered = x - x.mean(0)
    eig = np.linalg.eigh(centered.T @ centered / len(x))[0]
    assert coords.var(axis=0).sum() == pytest.approx(eig[-1] + eig[-2], abs=1e-8)


def test_two_dimensional_data_keeps_its_variance(rng):
    x = rng.normal(size=(100, 2)) * [3.0, 0.5]
    coords = pca_2d(x)
    assert coords.var(axis=0).sum() == pytest.approx(x.var(axis=0).sum(), abs=1e-10)


def test_zero_variance_warns():
    with pytest.warns(UserWarning, match="zero-variance"):
        coords = pca_2d(np.ones((5, 4)))
    assert coords.shape == (5, 2) and not coords.any()


def test_projection_needs_three_samples():
    with pytest.raises(DataError):
        pca_2d(np.zeros((2, 3)))


def test_project_writes_one_line_per_sample(tmp_path, rng):
    path = tmp_path / "p.csv"
    x = rng.normal(size=(9, 5))
    project_2d(x, list(range(9)), path)
    lines = path.read_text().splitlines()
    assert len(lines) == 9
    assert [int(line.split(",")[2]) for line in lines] == list(range(9))
    project_2d(x, None, path)
    assert all(line.endswith(",-1") for line in path.read_text().splitlines())
