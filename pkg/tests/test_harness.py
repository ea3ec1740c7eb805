import numpy as np
import pytest

from symphony_moe.errors import ArgumentError, DivergenceError, FrozenError
from symphony_moe.graph import load_adjacency
from symphony_moe.harness import (
    RunManifest,
    TaskParams,
    bench_overhead,
    contaminate,
    convergence_manifest,
    evaluate,
    generate_task,
    region_measures_mc,
    train,
)
from symphony_moe.harness.io import METRICS_COLUMNS, read_csv, strip_timing, write_csv
from symphony_moe.harness.training import split_loss
from symphony_moe.noise import NoiseKind


def small_manifest(epochs=3, **kw):
    base = dict(n_experts=4, k=2, hidden=8, task=TaskParams(n_regions=4, n_train=512, n_valid=128, n_test=256),
                eval_seeds=list(range(3)))
    base.update(kw)
    m = RunManifest(**base)
    m.optimizer.epochs = epochs
    return m


def test_single_region_targets_linear():
    task = generate_task(TaskParams(n_regions=1, dim=3, out_dim=2), seed=0)
    x = task.train.x
    X = np.hstack([x, np.ones((len(x), 1))])
    coef, *_ = np.linalg.lstsq(X, task.train.y, rcond=None)
    np.testing.assert_allclose(X @ coef, task.train.y, atol=1e-12)


def test_generate_task_deterministic():
    a, b = generate_task(TaskParams(), 5), generate_task(TaskParams(), 5)
    for split in ("train", "valid", "test"):
        assert getattr(a, split).x.tobytes() == getattr(b, split).x.tobytes()
        assert getattr(a, split).y.tobytes() == getattr(b, split).y.tobytes()
    assert generate_task(TaskParams(), 6).train.x.tobytes() != a.train.x.tobytes()


def test_region_occupancy_matches_oracle():
    task = generate_task(TaskParams(n_regions=4, n_test=10_000), seed=1)
    mu = region_measures_mc(task)
    freq = np.bincount(task.test.region, minlength=4) / 10_000
    se = np.sqrt(mu * (1 - mu) / 10_000)
    assert np.all(np.abs(freq - mu) <= 3 * se)


def test_classification_task_labels():
    task = generate_task(TaskParams(kind="RegionClassification", n_regions=5), seed=2)
    np.testing.assert_array_equal(task.train.y, task.train.region)
    assert task.params.out_dim == 5


@pytest.mark.parametrize("kind", list(NoiseKind))
def test_contaminate_bounds(kind):
    task = generate_task(TaskParams(), seed=3)
    x = task.test.x
    assert contaminate(x, 0.0, kind, centers=task.centers).tobytes() == x.tobytes()
    out = contaminate(x, 0.07, kind, seed=4, centers=task.centers)
    assert np.linalg.norm(out - x, axis=1).max() <= 0.07


def test_contaminate_mean_norm_and_errors():
    x = np.zeros((200_000, 4))
    out = contaminate(x, 0.5, "uniform-ball", seed=5)
    assert np.linalg.norm(out, axis=1).mean() == pytest.approx(0.5 * 4 / 5, rel=5e-3)
    with pytest.raises(ArgumentError):
        contaminate(x[:3], 0.1, "adversarial")


def test_adversarial_contamination_crosses_boundaries():
    task = generate_task(TaskParams(), seed=6)
    x = task.test.x
    eps = 0.1 * task.diameter
    moved = task.nearest_region(contaminate(x, eps, "adversarial", centers=task.centers))
    noisy = task.nearest_region(contaminate(x, eps, "uniform-ball", seed=7))
    base = task.nearest_region(x)
    assert np.mean(moved != base) > np.mean(noisy != base)


def test_baseline_training_writes_no_snapshots(tmp_path):
    res = train(small_manifest(mode="Baseline"), out_dir=tmp_path)
    assert not list(tmp_path.glob("adjacency_epoch*.txt"))
    assert res.layer.adjacency is None
    assert (tmp_path / "training.csv").is_file() and (tmp_path / "model" / "checkpoint.yaml").is_file()


def test_symphony_training_snapshots(tmp_path):
    m = small_manifest(mode="Symphony")
    res = train(m, out_dir=tmp_path)
    snaps = sorted(tmp_path.glob("adjacency_epoch*.txt"))
    assert len(snaps) == m.optimizer.epochs
    A, mode, beta, updates = load_adjacency(snaps[-1])
    np.testing.assert_allclose(A, res.layer.adjacency.A, rtol=1e-11)
    assert res.layer.adjacency.frozen
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-6)


def test_beta_near_one_freezes_in_practice(tmp_path):
    train(small_manifest(mode="Symphony", beta=1 - 1e-12), out_dir=tmp_path)
    a1, *_ = load_adjacency(tmp_path / "adjacency_epoch001.txt")
    a2, *_ = load_adjacency(tmp_path / "adjacency_epoch002.txt")
    np.testing.assert_allclose(a2, a1, atol=1e-9)


def test_convergence_regression():
    res = train(convergence_manifest(seed=0))
    assert res.final_train_loss < 0.1 * res.initial_train_loss


def test_divergence_dumps_diagnostics(tmp_path):
    m = small_manifest()
    m.optimizer.lr = 1e8
    with pytest.raises(DivergenceError) as info:
        train(m, out_dir=tmp_path)
    assert info.value.dump_path is not None
    assert (tmp_path / "diagnostics" / "last_batch_x.txt").is_file()
    assert (tmp_path / "diagnostics" / "adjacency.txt").is_file()


def test_evaluate_clean_row_and_frozen_contract():
    res = train(small_manifest(mode="Symphony"))
    rows = evaluate(res.layer, res.task, [0.0], [0, 1], split="test")
    clean = split_loss(res.layer, res.task, res.task.test)
    assert all(r["loss"] == clean for r in rows)
    for r in rows:
        assert 0.0 <= r["entropy_ratio"] <= 1.0
        assert sum(r["frequency"]) == pytest.approx(1.0)
    res.layer.adjacency.unfreeze()
    with pytest.raises(FrozenError):
        evaluate(res.layer, res.task, [0.0], [0])


def test_loss_grows_with_epsilon_on_average():
    res = train(small_manifest(mode="Baseline", epochs=10))
    grid = [0.0, 0.05, 0.1, 0.2]
    rows = evaluate(res.layer, res.task, grid, list(range(10)))
    means = [np.mean([r["loss"] for r in rows if r["epsilon_frac"] == e]) for e in grid]
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_manifest_roundtrip(tmp_path):
    m = small_manifest(mode="Symphony", norm_mode="RowNorm", noise_kind="adversarial")
    m.save(tmp_path / "m.yaml")
    again = RunManifest.load(tmp_path / "m.yaml")
    assert again.to_dict() == m.to_dict() and again.digest() == m.digest()
    (tmp_path / "bad.yaml").write_text("n_experts: 4\nbogus: 1\n")
    with pytest.raises(ArgumentError, match="unknown manifest keys"):
        RunManifest.load(tmp_path / "bad.yaml")
    with pytest.raises(ArgumentError, match="K exceeds expert count"):
        small_manifest(k=5).validate()


def test_csv_schema_and_reproducibility(tmp_path):
    outs = []
    for name in ("a", "b"):
        res = train(small_manifest(mode="Symphony"), out_dir=tmp_path / name)
        rows = evaluate(res.layer, res.task, [0.0, 0.1], [0, 1])
        write_csv(tmp_path / name / "metrics.csv", METRICS_COLUMNS, rows)
        outs.append(strip_timing(read_csv(tmp_path / name / "metrics.csv")))
        outs.append(strip_timing(read_csv(tmp_path / name / "training.csv")))
    assert outs[0] == outs[2] and outs[1] == outs[3]
    text = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert text[0] == "# schema_version=1" and text[1] == ",".join(METRICS_COLUMNS)
    assert (tmp_path / "a" / "metrics.dat").is_file()


def test_bench_rows_and_prediction():
    rows = bench_overhead([16], [512], K=2, repetitions=3, dim=32)
    (row,) = rows
    assert row["pred_infer_flops"] == 131072 and row["pred_train_flops"] - row["pred_infer_flops"] == 512
    assert row["baseline_s"] > 0 and row["symphony_s"] > 0
    with pytest.raises(ArgumentError):
        bench_overhead([2], [16], K=3, repetitions=1)
