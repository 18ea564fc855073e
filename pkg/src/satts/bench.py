"""Metrics, Proxy A-distance, and the comparison protocol over synthetic shifted tasks.

One experiment pretrains a surrogate once per model seed, builds the source
artifact, then adapts every requested method over a shuffled target stream
for each TTA seed and evaluates on the labeled target test split.
"""
from __future__ import annotations

import json
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapt import AdaptationConfig, batch_stream, run_adaptation, satts_step, ssa_step
from .select import (DEFAULT_GRID, RATIO_CEILING, lr_line_search, oracle_select, source_best_select,
                     target_rmse, worker_count)
from .srcstats import SourceStatsArtifact, build_artifact
from .surrogate import (Batch, SurrogateModel, SurrogateSpec, TrainConfig, ValidationError, build, make_optimizer,
                        pretrain)
from .tasks import Dataset, TaskConfig, gen_task, source_draw

METHODS = ("source", "tent", "ssa", "satts", "satts-no-iwv", "oracle")
GAP_LEVELS = (0.01, 0.03, 0.05)  # bump target range starts this far above the source range
FIXED_LR = 0.01  # SSA, Tent and the unselected ablation rows


# -------------------------------------------------------------------- metrics


@dataclass
class MetricSet:
    rmse: float
    mae: float
    r2: float


def metrics(pred, truth, normalization=None) -> MetricSet:
    """RMSE, MAE and R^2 over all entries, in normalized field units.

    With ``normalization`` the inputs are raw fields and are normalized first.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if pred.shape != truth.shape:
        raise ValidationError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if truth.size == 0:
        raise ValidationError("metrics need at least one sample")
    if normalization is not None:
        pred, truth = normalization.y(pred), normalization.y(truth)
    err = pred - truth
    sst = float(np.sum((truth - truth.mean()) ** 2))
    sse = float(np.sum(err * err))
    r2 = 1.0 - sse / sst if sst > 0 else (1.0 if sse == 0 else -math.inf)
    return MetricSet(rmse=float(np.sqrt(np.mean(err * err))), mae=float(np.mean(np.abs(err))), r2=r2)


def model_metrics(model: SurrogateModel, batch: Batch) -> MetricSet:
    if batch.targets is None:
        raise ValidationError("evaluation needs labeled data")
    return metrics(model.predict(batch.inputs), batch.targets)


# ------------------------------------------------------------------------ PAD


def pad_from_error(eps: float) -> float:
    return 2.0 * (1.0 - 2.0 * eps)


def pad_estimate(Y_src, Y_tgt, seed: int = 0, reps: int = 5, test_size: float = 0.3,
                 l2_strength: float = 0.01) -> float:
    """Proxy A-distance from a linear logistic domain classifier on the outputs.

    Both sides are subsampled to equal size, split 70/30 with stratification,
    and the held-out error is averaged over ``reps`` splits. The result is
    clipped to [0, 2].
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    A = np.atleast_2d(np.asarray(Y_src, dtype=np.float64))
    B = np.atleast_2d(np.asarray(Y_tgt, dtype=np.float64))
    if A.shape[0] < 20 or B.shape[0] < 20:
        raise ValidationError("PAD needs at least 20 samples per side")
    if A.shape[1] != B.shape[1]:
        raise ValidationError("both sides must have the same output dimension")
    rng = np.random.default_rng(seed)
    n = min(A.shape[0], B.shape[0])
    A = A[np.sort(rng.choice(A.shape[0], n, replace=False))]
    B = B[np.sort(rng.choice(B.shape[0], n, replace=False))]
    X = np.vstack([A, B])
    y = np.r_[np.zeros(n), np.ones(n)]
    errors = []
    for rep in range(reps):
        split_seed = int(rng.integers(2**31 - 1))
        Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=test_size, stratify=y, random_state=split_seed)
        if len(np.unique(ytr)) < 2 or len(np.unique(yte)) < 2:
            warnings.warn(f"single-class fold in repetition {rep}; resampling", stacklevel=2)
            continue
        clf = make_pipeline(StandardScaler(), LogisticRegression(C=l2_strength, max_iter=5000))
        clf.fit(Xtr, ytr)
        errors.append(1.0 - clf.score(Xte, yte))
    if not errors:
        raise ValidationError("every PAD split was degenerate")
    return float(np.clip(pad_from_error(float(np.mean(errors))), 0.0, 2.0))


def gap_task(gap: float, base: TaskConfig | None = None) -> TaskConfig:
    """Bump task whose 0.1-wide target range starts ``gap`` above 0.5."""
    base = base or TaskConfig()
    return replace(base, kind="bump", target_range=(0.5 + gap, 0.6 + gap))


# ----------------------------------------------------------------- experiment


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    latent_dim: int = 8
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "gelu"
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    methods: tuple[str, ...] = ("source", "ssa", "satts", "satts-no-iwv", "oracle")
    seeds: int = 20  # TTA seeds (target stream orders)
    model_seed: int = 0
    tau: float = 0.95
    m: int = 8
    grid: tuple[float, ...] = DEFAULT_GRID
    patience: int = 1
    ceiling: float = RATIO_CEILING
    labels: bool = True  # target labels may drive the (non-deployable) oracle selector

    def validate(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValidationError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if "oracle" in self.methods and not self.labels:
            raise ValidationError("the oracle selector needs target labels (enable labels)")
        if self.seeds < 1:
            raise ValidationError("at least one TTA seed is required")
        self.task.validate()
        self.train.validate()
        self.adapt.validate()
        return self

    def to_dict(self):
        d = asdict(self)
        d["task"] = self.task.to_dict()
        d["hidden"] = list(self.hidden)
        d["methods"] = list(self.methods)
        d["grid"] = list(self.grid)
        d["ceiling"] = self.ceiling if math.isfinite(self.ceiling) else "inf"
        return d

    def spec(self, variance_head=False) -> SurrogateSpec:
        return SurrogateSpec(self.task.input_dim, self.latent_dim, self.task.grid_size, hidden=self.hidden,
                             activation=self.activation, variance_head=variance_head, seed=self.model_seed)


@dataclass
class ArmResult:
    method: str
    seed: int
    metrics: MetricSet | None = None
    lr: float | None = None
    step: int = 0
    fallback: bool = False
    step_time: float | None = None
    error: str | None = None


@dataclass
class ExperimentReport:
    config: dict
    arms: list[ArmResult]
    pad: float | None
    source_val_rmse: float
    selection: list[dict] = field(default_factory=list)

    def methods(self) -> list[str]:
        seen = []
        for a in self.arms:
            if a.method not in seen:
                seen.append(a.method)
        return seen

    def values(self, method: str, key: str = "rmse") -> list[float]:
        return [getattr(a.metrics, key) for a in self.arms if a.method == method and a.metrics is not None]

    def summary(self) -> dict:
        out = {}
        for method in self.methods():
            row = {}
            for key in ("rmse", "mae", "r2"):
                v = np.asarray(self.values(method, key))
                if v.size:
                    row[key] = float(v.mean())
                    if v.size >= 2:
                        row[key + "_std"] = float(v.std(ddof=1))
            row["runs"] = len(self.values(method))
            row["failures"] = sum(1 for a in self.arms if a.method == method and a.error)
            out[method] = row
        return out

    def step_times(self) -> dict[str, float]:
        """Mean wall time per adaptation step (not part of the deterministic report)."""
        out = {}
        for method in self.methods():
            times = [a.step_time for a in self.arms if a.method == method and a.step_time is not None]
            if times:
                out[method] = float(np.mean(times))
        return out

    def to_dict(self) -> dict:
        return {"config": self.config, "pad": self.pad, "source_val_rmse": self.source_val_rmse,
                "summary": self.summary(), "arms": [_arm_dict(a) for a in self.arms],
                "selection": self.selection}


def _arm_dict(a: ArmResult) -> dict:
    d = asdict(a)
    del d["step_time"]  # wall-clock, kept out of the reproducible report
    return d


@dataclass
class Pretrained:
    model: SurrogateModel
    history: list
    artifact: SourceStatsArtifact
    data: dict[str, Dataset]


def prepare(cfg: ExperimentConfig, variance_head: bool = False) -> Pretrained:
    """Generate the task, pretrain one surrogate and build its source artifact."""
    data = gen_task(cfg.task)
    model = build(cfg.spec(variance_head))
    train = replace(cfg.train, seed=cfg.model_seed, loss="nll" if variance_head else cfg.train.loss)
    model, history = pretrain(model, data["source-train"].batch(), data["source-val"].batch(), train)
    art = build_artifact(model, data["source-val"].batch(), cfg.tau, cfg.m)
    return Pretrained(model, history, art, data)


def no_shift(pre: Pretrained, seed: int = 1) -> Pretrained:
    """Same model with its target split replaced by a fresh source-distribution draw."""
    task = pre.data["source-train"].task
    data = dict(pre.data)
    data["target-test"] = source_draw(task, len(pre.data["target-test"]), seed, pre.data["source-train"].norm)
    return Pretrained(pre.model, pre.history, pre.artifact, data)


def _timed_pass(model, stream, art, acfg):
    t0 = time.perf_counter()
    trace, adapted = run_adaptation(model, stream, art.stats, art.subset, acfg)
    steps = max(1, trace.steps)
    return adapted, (time.perf_counter() - t0) / steps


def _run_seed(cfg: ExperimentConfig, pre: Pretrained, tent_pre: Pretrained | None, seed: int):
    model, art = pre.model, pre.artifact
    target = pre.data["target-test"].batch()
    need_candidates = bool({"satts-no-iwv", "oracle"} & set(cfg.methods))
    stream = batch_stream(target.inputs, cfg.adapt.batch_size, seed=seed)
    arms: list[ArmResult] = []
    selection = None
    search = search_time = None
    for method in cfg.methods:
        arm = ArmResult(method, seed)
        try:
            if method == "source":
                arm.metrics = model_metrics(model, target)
            elif method in ("ssa", "tent"):
                base = tent_pre if method == "tent" else pre
                acfg = replace(cfg.adapt, method=method, lr=FIXED_LR)
                adapted, arm.step_time = _timed_pass(base.model, stream, base.artifact, acfg)
                arm.metrics, arm.lr, arm.step = model_metrics(adapted, target), FIXED_LR, len(stream)
            else:
                if search is None:
                    t0 = time.perf_counter()
                    search = lr_line_search(model, stream, art, replace(cfg.adapt, method="satts"), cfg.grid,
                                            cfg.patience, cfg.ceiling, full_trajectories=need_candidates,
                                            threads=1)
                    search_time = (time.perf_counter() - t0) / max(1, len(search.candidates))
                    sel = search.selection
                    selection = {"seed": seed, "lr": sel.lr, "step": sel.step, "iwv": sel.risk,
                                 "baseline_iwv": sel.baseline_risk, "fallback": sel.fallback}
                if method == "satts":
                    sel = search.selection
                    arm.metrics, arm.lr, arm.step = model_metrics(search.model, target), sel.lr, sel.step
                    arm.fallback, arm.step_time = sel.fallback, search_time
                else:
                    if method == "satts-no-iwv":
                        choice = source_best_select(model, search.candidates, art.subset)
                    else:
                        choice = oracle_select(model, search.candidates, target, search.initial)
                        arm.fallback = choice.step == 0
                    chosen = model.clone()
                    chosen.restore(choice.snapshot)
                    arm.metrics, arm.lr, arm.step = model_metrics(chosen, target), choice.lr, choice.step
        except Exception as exc:  # recorded per arm; the run continues
            arm.error = f"{type(exc).__name__}: {exc}"
            arm.metrics = None
        arms.append(arm)
    return arms, selection


def run_experiment(cfg: ExperimentConfig, pre: Pretrained | None = None,
                   threads: int | None = None) -> ExperimentReport:
    """All requested arms for every TTA seed; seeds run on worker threads, merged in seed order."""
    cfg.validate()
    pre = pre or prepare(cfg)
    tent_pre = prepare(cfg, variance_head=True) if "tent" in cfg.methods else None
    n = worker_count(cfg.seeds) if threads is None else max(1, threads)
    if n == 1:
        results = [_run_seed(cfg, pre, tent_pre, s) for s in range(cfg.seeds)]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(lambda s: _run_seed(cfg, pre, tent_pre, s), range(cfg.seeds)))
    arms = [a for seed_arms, _ in results for a in seed_arms]
    selection = [sel for _, sel in results if sel is not None]
    target = pre.data["target-test"].batch()
    val_rmse = target_rmse(pre.model, pre.data["source-val"].batch())
    pad = pad_estimate(pre.data["source-val"].batch().targets, target.targets, seed=cfg.model_seed)
    return ExperimentReport(cfg.to_dict(), arms, pad, val_rmse, selection)


# ------------------------------------------------------------------ ablations


def component_ablation(cfg: ExperimentConfig, pre: Pretrained | None = None) -> dict[str, list[float]]:
    """Target RMSE per TTA seed for alignment only, plus source anchor, plus IWV selection.

    The first two rows run one full pass at the fixed learning rate.
    """
    cfg.validate()
    pre = pre or prepare(cfg)
    model, art = pre.model, pre.artifact
    target = pre.data["target-test"].batch()
    rows = {"align": [], "align+src": [], "align+src+iwv": []}
    for seed in range(cfg.seeds):
        stream = batch_stream(target.inputs, cfg.adapt.batch_size, seed=seed)
        for name, lam in (("align", 0.0), ("align+src", cfg.adapt.lam)):
            acfg = replace(cfg.adapt, method="satts", lam=lam, lr=FIXED_LR)
            _, adapted = run_adaptation(model, stream, art.stats, art.subset, acfg)
            rows[name].append(target_rmse(adapted, target))
        search = lr_line_search(model, stream, art, replace(cfg.adapt, method="satts"), cfg.grid,
                                cfg.patience, cfg.ceiling)
        rows["align+src+iwv"].append(target_rmse(search.model, target))
    return rows


def step_timing(model: SurrogateModel, art: SourceStatsArtifact, batches, cfg: AdaptationConfig | None = None,
                runs: int = 10) -> dict[str, float]:
    """Median wall time of one SATTS and one SSA update on identical models and batches."""
    cfg = cfg or AdaptationConfig()
    out = {}
    for method in ("satts", "ssa"):
        acfg = replace(cfg, method=method, lr=0.0)
        times = []
        for r in range(runs):
            probe = model.clone()
            opt = make_optimizer(acfg.optimizer)
            xb = batches[r % len(batches)]
            t0 = time.perf_counter()
            if method == "satts":
                satts_step(probe, xb, art.stats, art.subset, acfg, opt)
            else:
                ssa_step(probe, xb, art.stats, acfg, opt)
            times.append(time.perf_counter() - t0)
        out[method] = float(np.median(times))
    return out


# --------------------------------------------------------------------- report


def format_table(report: ExperimentReport) -> str:
    summary = report.summary()
    lines = ["method\trmse\trmse_std\tmae\tr2\truns\tfailures"]
    for method, row in summary.items():
        def f(key):
            return f"{row[key]:.6f}" if key in row else "-"
        lines.append(f"{method}\t{f('rmse')}\t{f('rmse_std')}\t{f('mae')}\t{f('r2')}\t{row['runs']}\t{row['failures']}")
    return "\n".join(lines) + "\n"


def relative_improvement(report: ExperimentReport) -> dict[str, float]:
    """Per-method mean-RMSE improvement over the source model, in percent."""
    summary = report.summary()
    if "source" not in summary or "rmse" not in summary["source"]:
        return {}
    base = summary["source"]["rmse"]
    return {m: 100.0 * (base - row["rmse"]) / base for m, row in summary.items()
            if m != "source" and "rmse" in row}


def _plot(report: ExperimentReport, path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    imp = relative_improvement(report)
    with matplotlib.rc_context({"svg.hashsalt": "satts", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3))
        names = list(imp)
        ax.bar(range(len(names)), [imp[n] for n in names], color="0.4")
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=20)
        ax.set_ylabel("RMSE improvement over source [%]")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)


def emit_report(report: ExperimentReport, out_dir) -> dict[str, Path]:
    """Write report.json, table.tsv and improvement.svg; byte-identical for identical reports.

    Wall-clock step times go to runtime.tsv, which is not reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "table": out / "table.tsv", "plot": out / "improvement.svg",
             "runtime": out / "runtime.tsv"}
    paths["report"].write_text(json.dumps(_jsonable(report.to_dict()), sort_keys=True, indent=2) + "\n")
    paths["table"].write_text(format_table(report))
    _plot(report, paths["plot"])
    times = report.step_times()
    paths["runtime"].write_text("method\tseconds_per_step\n"
                                + "".join(f"{m}\t{t:.6g}\n" for m, t in times.items()))
    return paths


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    return obj
