"""Unsupervised model selection for test-time adaptation.

Candidates are (learning rate, step) snapshots of an adaptation run. The
importance-weighted validation (IWV) risk scores a candidate by its squared
error on the stored labeled source samples, reweighted by a Gaussian density
ratio ``p_tgt(z) / p_src(z)`` evaluated in the leading source principal
subspace.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adapt import AdaptationConfig, run_adaptation, source_risk
from .numkit import GaussianParams, NumericError, ShapeError, fit_gaussian, gauss_logpdf, gaussian
from .srcstats import DOptimalSubset, SourceStats, SourceStatsArtifact
from .surrogate import Batch, SurrogateModel, ValidationError

DEFAULT_GRID = (0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001)
RATIO_CEILING = 50.0


@dataclass
class LatentGaussianPair:
    """Source and target Gaussians sharing one reduction ``(z - center) @ basis``."""
    basis: np.ndarray
    center: np.ndarray
    source: GaussianParams
    target: GaussianParams
    ceiling: float = RATIO_CEILING

    def __post_init__(self):
        r = self.basis.shape[1]
        if self.source.dim != r or self.target.dim != r:
            raise ShapeError("both Gaussians must live in the reduced space of the basis")
        if not self.ceiling > 0:
            raise ValidationError("ratio ceiling must be positive")

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def reduce(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.basis.shape[0]:
            raise ShapeError(f"latent dim {Z.shape[1]} != basis dim {self.basis.shape[0]}")
        return (Z - self.center) @ self.basis


def _reduction(stats: SourceStats):
    return stats.eigenvectors[:, : stats.r], stats.mean


def fit_latent_pair(Z_src, Z_tgt, stats: SourceStats, ceiling: float = RATIO_CEILING,
                    ridge: float | None = None) -> LatentGaussianPair:
    basis, center = _reduction(stats)
    Z_src = np.atleast_2d(np.asarray(Z_src, dtype=np.float64))
    Z_tgt = np.atleast_2d(np.asarray(Z_tgt, dtype=np.float64))
    if Z_src.shape[0] < 2 or Z_tgt.shape[0] < 2:
        raise ValidationError("density-ratio fit needs at least two samples on each side")
    src = fit_gaussian((Z_src - center) @ basis, ridge)
    tgt = fit_gaussian((Z_tgt - center) @ basis, ridge)
    return LatentGaussianPair(basis, center, src, tgt, ceiling)


def pair_from_artifact(art: SourceStatsArtifact, Z_tgt, ceiling: float = RATIO_CEILING) -> LatentGaussianPair:
    """Pair whose source side is the full source-validation Gaussian stored in the artifact."""
    basis, center = _reduction(art.stats)
    Z_tgt = np.atleast_2d(np.asarray(Z_tgt, dtype=np.float64))
    if Z_tgt.shape[0] < 2:
        raise ValidationError("density-ratio fit needs at least two target samples")
    src = gaussian(art.latent_mean, art.latent_cov)
    tgt = fit_gaussian((Z_tgt - center) @ basis)
    return LatentGaussianPair(basis, center, src, tgt, ceiling)


def log_density_ratio(z, pair: LatentGaussianPair):
    """Unclipped ``log p_tgt - log p_src`` of latent vector(s) ``z``."""
    single = np.ndim(z) == 1
    u = pair.reduce(z)
    out = gauss_logpdf(u, pair.target) - gauss_logpdf(u, pair.source)
    return float(out[0]) if single else out


def density_ratio(z, pair: LatentGaussianPair):
    log_beta = log_density_ratio(z, pair)
    cap = math.log(pair.ceiling) if math.isfinite(pair.ceiling) else math.inf
    # clipped entries return the ceiling itself, not exp(log(ceiling))
    return np.where(log_beta >= cap, pair.ceiling, np.exp(np.minimum(log_beta, cap)))


def weighted_risk(weights, sq_residuals) -> float:
    """``mean(beta_i * e_i)`` with ``e_i`` the squared 2-norm residual of sample i."""
    w = np.asarray(weights, dtype=np.float64)
    e = np.asarray(sq_residuals, dtype=np.float64)
    if w.shape != e.shape or w.size == 0:
        raise ShapeError("weights and residuals must be non-empty and aligned")
    return float(np.mean(w * e))


def iwv_risk(model: SurrogateModel, subset: DOptimalSubset, pair: LatentGaussianPair,
             frozen_latents: np.ndarray | None = None) -> float:
    """Importance-weighted source risk of ``model`` on the stored subset.

    Weights use the subset latents of the current model unless
    ``frozen_latents`` (pre-adaptation latents) are supplied.
    """
    if subset.m == 0:
        raise ValidationError("empty subset")
    Z, pred = model.forward(subset.inputs)
    e = np.sum((pred - subset.targets) ** 2, axis=1)
    beta = density_ratio(Z if frozen_latents is None else frozen_latents, pair)
    val = weighted_risk(beta, e)
    if not math.isfinite(val):
        raise NumericError("non-finite IWV risk")
    return val


# --------------------------------------------------------------- candidates


@dataclass
class Candidate:
    lr: float
    step: int
    iwv: float
    snapshot: dict
    eligible: bool = True  # inside the early-stopped prefix of its lr


@dataclass
class SelectionResult:
    lr: float | None
    step: int
    risk: float
    baseline_risk: float
    table: list[tuple[float, int, float, bool]] = field(default_factory=list)
    fallback: bool = False

    def to_text(self, grid) -> str:
        lines = [f"grid\t{','.join(f'{g:g}' for g in grid)}",
                 f"baseline_iwv\t{self.baseline_risk:.17g}",
                 f"chosen_lr\t{'none' if self.lr is None else f'{self.lr:g}'}",
                 f"chosen_step\t{self.step}",
                 f"chosen_iwv\t{self.risk:.17g}",
                 f"fallback\t{str(self.fallback).lower()}",
                 "lr\tstep\tiwv\teligible"]
        for lr, step, risk, ok in self.table:
            lines.append(f"{lr:g}\t{step}\t{risk:.17g}\t{int(ok)}")
        return "\n".join(lines) + "\n"


@dataclass
class LineSearchResult:
    selection: SelectionResult
    model: SurrogateModel
    candidates: list[Candidate]
    initial: dict  # adaptable parameters before adaptation
    errors: list[str] = field(default_factory=list)


def worker_count(jobs: int) -> int:
    env = os.environ.get("SATTS_THREADS")
    cap = int(env) if env and env.isdigit() and int(env) > 0 else (os.cpu_count() or 1)
    return max(1, min(cap, jobs))


def _earliest(items, key):
    """Minimum by ``key`` with ties broken by lowest step, then lowest lr."""
    return min(items, key=lambda c: (key(c), c.step, c.lr))


def _search_one(model, stream, art, cfg, lr, pair, patience, full, frozen):
    rows: list[Candidate] = []
    state = {"best": iwv_risk(model, art.subset, pair, frozen), "bad": 0, "stopped": False}
    errors: list[str] = []

    def callback(m, rec):
        risk = math.nan
        if rec.rolled_back:
            errors.append(f"lr={lr:g} step={rec.step}: non-finite update rolled back")
        else:
            try:
                risk = iwv_risk(m, art.subset, pair, frozen)
            except NumericError as exc:
                errors.append(f"lr={lr:g} step={rec.step}: {exc}")
        ok = not state["stopped"] and math.isfinite(risk)
        rows.append(Candidate(lr, rec.step, risk, m.snapshot(), ok))
        if not state["stopped"]:
            if math.isfinite(risk) and risk < state["best"]:
                state["best"], state["bad"] = risk, 0
            else:
                state["bad"] += 1
                if state["bad"] >= patience:
                    state["stopped"] = True
        return state["stopped"] and not full

    run_adaptation(model, stream, art.stats, art.subset, replace(cfg, lr=lr), callback)
    return rows, errors


def lr_line_search(model: SurrogateModel, stream, art: SourceStatsArtifact, cfg: AdaptationConfig,
                   grid=DEFAULT_GRID, patience: int = 1, ceiling: float = RATIO_CEILING,
                   fit_batches: int = 2, full_trajectories: bool = False,
                   frozen_latents: bool = False, threads: int | None = None) -> LineSearchResult:
    """IWV-driven choice of learning rate and stopping step.

    Every lr restarts from the pretrained model over the same target stream.
    A lr stops once its IWV risk has not improved for ``patience`` steps;
    with ``full_trajectories`` the pass continues (for other selectors) but
    later steps are not eligible for IWV selection. If no eligible candidate
    beats the unadapted risk, the pretrained model is returned unchanged.
    """
    grid = tuple(float(g) for g in grid)
    if not grid:
        raise ValidationError("learning-rate grid is empty")
    if any(g < 0 for g in grid):
        raise ValidationError("learning rates must be >= 0")
    if patience < 1:
        raise ValidationError("patience must be >= 1")
    stream = list(stream)
    if not stream:
        raise ValidationError("empty target stream")
    Z_fit, _ = model.forward(np.vstack(stream[:fit_batches]))
    pair = pair_from_artifact(art, Z_fit, ceiling)
    frozen = model.forward(art.subset.inputs)[0] if frozen_latents else None
    baseline = iwv_risk(model, art.subset, pair, frozen)

    def job(lr):
        return _search_one(model, stream, art, cfg, lr, pair, patience, full_trajectories, frozen)

    n = worker_count(len(grid)) if threads is None else max(1, threads)
    if n == 1:
        results = [job(lr) for lr in grid]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(job, grid))
    candidates = [c for rows, _ in results for c in rows]
    errors = [e for _, errs in results for e in errs]
    eligible = [c for c in candidates if c.eligible]
    table = [(c.lr, c.step, c.iwv, c.eligible) for c in candidates]
    initial = model.snapshot()
    best = _earliest(eligible, lambda c: c.iwv) if eligible else None
    if best is None or not best.iwv < baseline:
        sel = SelectionResult(None, 0, baseline, baseline, table, fallback=True)
        return LineSearchResult(sel, model.clone(), candidates, initial, errors)
    chosen = model.clone()
    chosen.restore(best.snapshot)
    sel = SelectionResult(best.lr, best.step, best.iwv, baseline, table)
    return LineSearchResult(sel, chosen, candidates, initial, errors)


# ------------------------------------------------------- alternative selectors


@dataclass
class Choice:
    lr: float | None
    step: int
    score: float
    snapshot: dict
    deployable: bool = True


def _score_candidates(model, candidates, fn):
    probe = model.clone()
    out = []
    for c in candidates:
        probe.restore(c.snapshot)
        out.append((c, fn(probe)))
    return out


def source_best_select(model: SurrogateModel, candidates: list[Candidate], subset: DOptimalSubset) -> Choice:
    """Candidate with the lowest unweighted squared error on the stored source samples."""
    if not candidates:
        raise ValidationError("no candidates to select from")
    scored = _score_candidates(model, candidates, lambda m: source_risk(m, subset))
    scored = [(c, s if math.isfinite(s) else math.inf) for c, s in scored]
    c, s = min(scored, key=lambda cs: (cs[1], cs[0].step, cs[0].lr))
    return Choice(c.lr, c.step, s, c.snapshot)


def target_rmse(model: SurrogateModel, batch: Batch) -> float:
    return float(np.sqrt(np.mean((model.predict(batch.inputs) - batch.targets) ** 2)))


def oracle_select(model: SurrogateModel, candidates: list[Candidate], target: Batch,
                  initial: dict | None = None) -> Choice:
    """Candidate with the lowest true target RMSE; uses target labels, so not deployable.

    ``initial`` adds the unadapted model as a step-0 candidate.
    """
    if target.targets is None:
        raise ValidationError("oracle selection needs labeled target data")
    pool = list(candidates)
    if initial is not None:
        pool.insert(0, Candidate(0.0, 0, math.nan, initial))
    if not pool:
        raise ValidationError("no candidates to select from")
    scored = _score_candidates(model, pool, lambda m: target_rmse(m, target))
    scored = [(c, s if math.isfinite(s) else math.inf) for c, s in scored]
    c, s = min(scored, key=lambda cs: (cs[1], cs[0].step, cs[0].lr))
    return Choice(None if c.step == 0 else c.lr, c.step, s, c.snapshot, deployable=False)
