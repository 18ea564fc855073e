"""One test per acceptance criterion; each prints a PASS/FAIL line.

Experiment-level criteria run the default bench configuration (bump task,
largest gap, 20 TTA seeds) and are marked slow.
"""
import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from satts.adapt import (AdaptationConfig, ProjectedTargetStats, batch_stream, kl_alignment_loss,
                         run_adaptation, satts_loss_and_grads, ssa_loss_and_grads, tent_hook)
from satts.bench import (GAP_LEVELS, ExperimentConfig, component_ablation, gap_task, no_shift, pad_estimate,
                         pad_from_error, prepare, run_experiment, step_timing)
from satts.numkit import gaussian
from satts.select import LatentGaussianPair, density_ratio, weighted_risk
from satts.srcstats import (DOptimalSubset, SourceStats, artifact_bytes, artifact_from_bytes, doptimal_select,
                            fit_source_stats, importance_weights, whiten)
from satts.surrogate import Batch, build, checkpoint_bytes, checkpoint_from_bytes, loss_and_grads
from satts.tasks import TaskConfig, dataset_bytes, dataset_from_bytes, source_draw

from conftest import fd_check, perturbed, small_spec

slow = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    def report(n, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, f"criterion {n} ({title}) not met: {detail}"
    return report


# ------------------------------------------------------------ shared experiments


def default_cfg(gap=max(GAP_LEVELS)):
    return ExperimentConfig(task=gap_task(gap, TaskConfig()))


@pytest.fixture(scope="module")
def shifted():
    cfg = default_cfg()
    t0 = time.perf_counter()
    pre = prepare(cfg)
    rep = run_experiment(cfg, pre)
    return cfg, pre, rep, time.perf_counter() - t0


@pytest.fixture(scope="module")
def unshifted(shifted):
    cfg, pre, _, _ = shifted
    t0 = time.perf_counter()
    same = no_shift(pre)
    rep = run_experiment(replace(cfg, methods=("source", "satts", "oracle")), same)
    return same, rep, time.perf_counter() - t0


def mean(v):
    return float(np.mean(v))


# -------------------------------------------------------------------- criteria


def test_01_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = perturbed(build(small_spec(seed=seed, activation=("gelu", "tanh", "silu")[seed % 3])), seed)
        xs = rng.standard_normal((30, 3))
        b = Batch(xs[:5], rng.standard_normal((5, 6)))
        _, g = loss_and_grads(m, b)
        worst["mse"] = max(worst.get("mse", 0), fd_check(lambda: loss_and_grads(m, b)[0], m.params, g,
                                                         list(m.params)))
        s = fit_source_stats(m.forward(xs)[0], 0.9)
        s = replace(s, alpha=importance_weights(m.W, s))
        sub = DOptimalSubset(np.arange(3), xs[:3], m.predict(xs[:3]) + 0.3 * rng.standard_normal((3, 6)))
        xt = 1.5 * rng.standard_normal((8, 3)) + 0.5
        for mode in ("scaled", "weighted"):
            for name, lam in ((f"kl-{mode}", 0.0), (f"tta-{mode}", 0.125)):
                _, _, _, g = satts_loss_and_grads(m, xt, s, sub, lam, mode, s.r)
                f = lambda: satts_loss_and_grads(m, xt, s, sub, lam, mode, s.r)[0]  # noqa: E731
                worst[name] = max(worst.get(name, 0), fd_check(f, m.params, g, m.adaptable))
        mv = perturbed(build(small_spec(seed=seed, variance_head=True)), seed)
        _, g = loss_and_grads(mv, Batch(xt), tent_hook(6), "adaptable")
        f = lambda: loss_and_grads(mv, Batch(xt), tent_hook(6))[0]  # noqa: E731
        worst["tent"] = max(worst.get("tent", 0), fd_check(f, mv.params, g, mv.adaptable))
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    verdict(1, "gradient fidelity", max(worst.values()) <= 1e-4 and elapsed < 60, detail)


def _volume(Y):
    return np.linalg.det(Y @ Y.T) if Y.shape[0] < Y.shape[1] else np.linalg.det(Y.T @ Y)


def test_02_doptimal_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    worst_ratio, worst_pct, bad = math.inf, math.inf, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        C = int(rng.integers(2, 5))
        m = int(rng.integers(1, min(3, C) + 1))
        Z = rng.standard_normal((12, C)) @ rng.standard_normal((C, C))
        s = fit_source_stats(Z, 1.0)
        Y = whiten(Z, s)
        chosen = _volume(Y[doptimal_select(Z, s, m)])
        vols = np.array([_volume(Y[list(S)]) for S in itertools.combinations(range(12), m)])
        ratio = chosen / vols.max()
        pct = float(np.mean(vols <= chosen * (1 + 1e-12)))
        worst_ratio, worst_pct = min(worst_ratio, ratio), min(worst_pct, pct)
        bad += ratio < 0.5 or pct < 0.95
    elapsed = time.perf_counter() - t0
    verdict(2, "D-optimal vs exhaustive", bad == 0 and elapsed < 30,
            f"min ratio {worst_ratio:.3f}, min percentile {worst_pct:.3f}, failures {bad}/100, {elapsed:.1f}s")


def test_03_closed_forms(verdict):
    one = SourceStats(np.zeros(1), np.ones(1), np.eye(1), 1, 0.95, np.ones(1))
    pair = LatentGaussianPair(np.eye(1), np.zeros(1), gaussian([0.0], [[1.0]], ridge=0.0),
                              gaussian([1.0], [[1.0]], ridge=0.0))
    got = {
        "kl var 2": (kl_alignment_loss(ProjectedTargetStats(np.zeros(1), np.array([2.0])), one), 0.25),
        "kl mean 1": (kl_alignment_loss(ProjectedTargetStats(np.ones(1), np.array([1.0])), one), 1.0),
        "iwv": (weighted_risk([2.0], [0.5]), 1.0),
        "ratio z=0.5": (float(density_ratio(np.array([0.5]), pair)), 1.0),
        "ratio z=1": (float(density_ratio(np.array([1.0]), pair)), math.exp(0.5)),
        "pad eps 0.5": (pad_from_error(0.5), 0.0),
        "pad eps 0.25": (pad_from_error(0.25), 1.0),
        "pad eps 0": (pad_from_error(0.0), 2.0),
    }
    err = {k: abs(a - b) for k, (a, b) in got.items()}
    verdict(3, "closed forms", max(err.values()) <= 1e-9, f"max abs error {max(err.values()):.1e}")


def test_04_ssa_reduction(verdict):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        C = int(rng.integers(2, 6))
        m = perturbed(build(small_spec(seed=seed, latent_dim=C, output_dim=1)), seed)
        xs = rng.standard_normal((40, 3))
        s = fit_source_stats(m.forward(xs)[0], float(rng.uniform(0.5, 1.0)))
        s = replace(s, alpha=importance_weights(m.W, s))
        sub = DOptimalSubset(np.arange(4), xs[:4], rng.standard_normal((4, 1)))
        cfg = AdaptationConfig(alpha_mode="weighted", directions="all", lam=0.0)
        xt = rng.standard_normal((16, 3)) + rng.standard_normal(3)
        a, _, _, ga = satts_loss_and_grads(m, xt, s, sub, cfg.lam, cfg.alpha_mode, cfg.satts_top_k(s))
        b, gb = ssa_loss_and_grads(m, xt, s, C)
        worst = max(worst, abs(a - b), *(float(np.max(np.abs(ga[k] - gb[k]))) for k in gb))
    verdict(4, "SSA reduction", worst <= 1e-12, f"max |loss or grad difference| {worst:.1e} over 50 instances")


@slow
def test_05_no_shift_stability(verdict, unshifted):
    _, rep, elapsed = unshifted
    src, sat = mean(rep.values("source")), mean(rep.values("satts"))
    worst = max(abs(a - b) / b for a, b in zip(rep.values("satts"), rep.values("source")))
    rel = abs(sat - src) / src
    verdict(5, "no-shift stability", rel <= 0.01 and elapsed < 600,
            f"source {src:.5f}, satts {sat:.5f}, mean gap {100 * rel:.2f}% (worst seed {100 * worst:.2f}%), "
            f"{elapsed:.0f}s")


@slow
def test_06_improvement_under_shift(verdict, shifted):
    _, _, rep, elapsed = shifted
    src, sat, ssa = (mean(rep.values(k)) for k in ("source", "satts", "ssa"))
    gain = (src - sat) / src
    ok = sat < src and gain >= 0.02 and sat <= ssa and elapsed < 900
    verdict(6, "improvement under shift", ok,
            f"source {src:.5f}, satts {sat:.5f} ({100 * gain:.2f}% gain, need >= 2%), ssa {ssa:.5f}, "
            f"{elapsed:.0f}s")


@slow
def test_07_selector_ordering(verdict, shifted, unshifted):
    cfg, _, rep, _ = shifted
    experiments = {f"gap {max(GAP_LEVELS)}": rep, "no shift": unshifted[1]}
    for gap in sorted(set(GAP_LEVELS) - {max(GAP_LEVELS)}):
        c = replace(default_cfg(gap), methods=("source", "satts", "oracle"))
        experiments[f"gap {gap}"] = run_experiment(c)
    oracle_bad = iwv_bad = runs = 0
    worst = 0.0
    for r in experiments.values():
        for o, i, s in zip(r.values("oracle"), r.values("satts"), r.values("source")):
            runs += 1
            oracle_bad += o > i
            iwv_bad += i > 1.01 * s
            worst = max(worst, i / s)
    verdict(7, "selector ordering", oracle_bad == 0 and iwv_bad == 0 and runs == 20 * len(experiments),
            f"{runs} runs over {len(experiments)} experiments; oracle > iwv in {oracle_bad}, "
            f"iwv > 1.01 source in {iwv_bad}; worst iwv/source {worst:.3f}")


@slow
def test_08_component_ablation(verdict, shifted):
    cfg, pre, _, _ = shifted
    rows = {k: mean(v) for k, v in component_ablation(cfg, pre).items()}
    a, b, c = rows["align"], rows["align+src"], rows["align+src+iwv"]
    verdict(8, "component ablation", b <= 1.005 * a and c <= 1.005 * b,
            f"align {a:.5f}, +source risk {b:.5f}, +iwv {c:.5f}")


@slow
def test_09_runtime_overhead(verdict, shifted):
    _, pre, _, _ = shifted
    x = pre.data["target-test"].batch().inputs
    batches = batch_stream(x, 64, seed=0)
    t = step_timing(pre.model, pre.artifact, batches, runs=10)
    ratio = t["satts"] / t["ssa"]
    verdict(9, "runtime overhead", ratio <= 3.0,
            f"satts {1e3 * t['satts']:.2f} ms, ssa {1e3 * t['ssa']:.2f} ms per step, ratio {ratio:.2f}")


@slow
def test_10_pad_sanity(verdict, shifted):
    cfg, pre, rep, _ = shifted
    val = pre.data["source-val"]
    same = source_draw(cfg.task, len(val), 7, val.norm)
    identical = pad_estimate(val.targets, same.targets)
    verdict(10, "PAD sanity", identical <= 0.15 and rep.pad >= 1.0,
            f"identical domains {identical:.3f}, max gap {rep.pad:.3f}")


def test_11_frozen_predictor_and_round_trips(verdict, tiny_task, tiny_pretrained):
    _, data = tiny_task
    model, _, art = tiny_pretrained
    stream = batch_stream(data["target-test"].batch().inputs, 32, seed=0)
    frozen = [n for n in model.params if n not in model.adaptable]
    moved = changed = 0
    for method, lr in (("satts", 0.05), ("ssa", 0.05), ("satts", 1e3)):
        _, adapted = run_adaptation(model, stream, art.stats, art.subset, AdaptationConfig(method=method, lr=lr))
        moved += any(not np.array_equal(adapted.params[n], model.params[n]) for n in model.adaptable)
        changed += sum(not np.array_equal(adapted.params[n], model.params[n]) for n in frozen)
    blobs = {"checkpoint": (checkpoint_bytes(model), lambda b: checkpoint_bytes(checkpoint_from_bytes(b))),
             "artifact": (artifact_bytes(art), lambda b: artifact_bytes(artifact_from_bytes(b))),
             "dataset": (dataset_bytes(data["target-test"]), lambda b: dataset_bytes(dataset_from_bytes(b)))}
    same = {k: again(blob) == blob for k, (blob, again) in blobs.items()}
    verdict(11, "frozen predictor and round-trips", changed == 0 and moved > 0 and all(same.values()),
            f"{changed} of {len(frozen)} frozen tensors changed over 3 runs; byte-exact: {same}")
