import numpy as np
import pytest

from satts import binio
from satts.surrogate import ValidationError
from satts.tasks import (DATA_MAGIC, TaskConfig, bump_field, dataset_bytes, dataset_from_bytes, gen_task,
                         heat_field, load_dataset, save_dataset)


def test_bump_closed_form_peak():
    K = 129
    y = bump_field([[1.0, 0.5, 0.1]], K)[0]
    assert y.argmax() == 64 and y.max() == 1.0


def test_heat_constant_field_degenerate_case():
    y = heat_field([[2.0, 0.0, 0.3, 0.3]], 64)
    assert np.allclose(y, 0.3, atol=1e-15)


def test_heat_satisfies_discrete_equation():
    k, q = 1.7, 2.5
    K = 101
    u = heat_field([[k, q, 0.1, 0.9]], K)[0]
    h = 1.0 / (K - 1)
    lap = (u[2:] - 2 * u[1:-1] + u[:-2]) / h**2
    assert np.allclose(-k * lap, q, atol=1e-8)
    assert u[0] == pytest.approx(0.1) and u[-1] == pytest.approx(0.9)


def test_gen_task_deterministic_and_noise_free_identical():
    cfg = TaskConfig(grid_size=32, n_train=20, n_val=10, n_test=10, seed=4)
    a, b = gen_task(cfg), gen_task(cfg)
    assert all(dataset_bytes(a[s]) == dataset_bytes(b[s]) for s in a)
    clean = gen_task(TaskConfig(grid_size=32, n_train=20, n_val=10, n_test=10, seed=4, noise=0.0))
    ds = clean["source-train"]
    assert np.array_equal(ds.targets, bump_field(ds.inputs, 32))


def test_gen_task_respects_ranges():
    cfg = TaskConfig(grid_size=32, n_train=200, n_val=50, n_test=200)
    d = gen_task(cfg)
    assert d["source-train"].inputs[:, 1].min() >= 0.2 and d["source-train"].inputs[:, 1].max() <= 0.5
    assert d["target-test"].inputs[:, 1].min() >= 0.55 and d["target-test"].inputs[:, 1].max() <= 0.65
    heat = gen_task(TaskConfig(kind="heat-1d", grid_size=32, source_range=(0.5, 1.5), target_range=(2.0, 3.0),
                               n_train=30, n_val=10, n_test=10))
    assert heat["target-test"].inputs[:, 0].min() >= 2.0


@pytest.mark.parametrize("bad", [dict(source_range=(0.2, 0.6), target_range=(0.55, 0.65)),
                                 dict(grid_size=8), dict(kind="wave"), dict(noise=-1.0),
                                 dict(source_range=(0.5, 0.2)), dict(n_test=0)])
def test_task_validation(bad):
    with pytest.raises(ValidationError):
        gen_task(TaskConfig(**bad))


def test_normalization_from_source_train_only():
    d = gen_task(TaskConfig(grid_size=32, n_train=100, n_val=30, n_test=60, seed=1))
    src, tgt = d["source-train"], d["target-test"]
    y = src.batch().targets
    assert abs(y.mean()) < 1e-12 and abs(y.std() - 1.0) < 1e-12
    assert tgt.norm is src.norm
    refit = (tgt.targets - tgt.targets.mean()) / tgt.targets.std()
    assert not np.allclose(refit, tgt.batch().targets)


def test_dataset_round_trip_and_labels(tmp_path):
    d = gen_task(TaskConfig(grid_size=64, n_train=12, n_val=6, n_test=6))
    p, q = tmp_path / "a.sttd", tmp_path / "b.sttd"
    save_dataset(d["target-test"], p)
    save_dataset(load_dataset(p), q)
    assert p.read_bytes() == q.read_bytes() and p.read_bytes()[:8] == DATA_MAGIC
    loaded = load_dataset(p)
    assert loaded.task.grid_size == 64 and loaded.targets.shape == (6, 64)
    unl = d["target-test"].without_labels()
    back = dataset_from_bytes(dataset_bytes(unl))
    assert not back.labeled and np.array_equal(back.inputs, unl.inputs)
    with pytest.raises(binio.FormatError):
        dataset_from_bytes(dataset_bytes(unl)[:-1])


def test_source_draw_stays_in_source_range_with_given_norm():
    from satts.tasks import source_draw
    cfg = TaskConfig(grid_size=32, n_train=50, n_val=10, n_test=10)
    d = gen_task(cfg)
    norm = d["source-train"].norm
    a = source_draw(cfg, 40, 5, norm)
    assert a.norm is norm and a.domain == "target-test" and a.targets.shape == (40, 32)
    assert a.inputs[:, 1].min() >= 0.2 and a.inputs[:, 1].max() <= 0.5
    assert np.array_equal(a.inputs, source_draw(cfg, 40, 5, norm).inputs)
    with pytest.raises(ValidationError):
        source_draw(cfg, 0, 5, norm)
