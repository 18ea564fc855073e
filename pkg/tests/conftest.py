import numpy as np
import pytest

from satts.srcstats import build_artifact
from satts.surrogate import SurrogateSpec, TrainConfig, build, pretrain
from satts.tasks import TaskConfig, gen_task


def small_spec(seed=0, **kw):
    base = dict(input_dim=3, latent_dim=4, output_dim=6, hidden=(5, 5), seed=seed)
    base.update(kw)
    return SurrogateSpec(**base)


def perturbed(model, seed, scale=0.3):
    """Copy of ``model`` with layer-norm parameters moved off their identity init."""
    rng = np.random.default_rng(seed)
    m = model.clone()
    for n in m.adaptable:
        m.params[n] = m.params[n] + scale * rng.standard_normal(m.params[n].shape)
    return m


def fd_check(f, params, grads, names, h=1e-5):
    """Max relative error of analytic ``grads`` against central differences of ``f``."""
    worst = 0.0
    for n in names:
        p = params[n]
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            num = (up - down) / (2 * h)
            ana = grads[n].reshape(-1)[i]
            err = abs(num - ana) / max(1e-6, abs(num) + abs(ana))
            worst = max(worst, err)
    return worst


@pytest.fixture(scope="session")
def tiny_task():
    cfg = TaskConfig(grid_size=32, n_train=192, n_val=96, n_test=192, seed=3)
    return cfg, gen_task(cfg)


@pytest.fixture(scope="session")
def tiny_pretrained(tiny_task):
    cfg, data = tiny_task
    spec = SurrogateSpec(cfg.input_dim, 4, cfg.grid_size, hidden=(16, 16), seed=1)
    model, history = pretrain(build(spec), data["source-train"].batch(), data["source-val"].batch(),
                              TrainConfig(epochs=40, patience=40, lr=3e-3))
    art = build_artifact(model, data["source-val"].batch(), m=6)
    return model, history, art
