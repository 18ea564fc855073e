"""Test-time adaptation engines: SATTS plus the SSA and Tent baselines.

Each engine updates only the LayerNorm parameters of ``phi``. SATTS aligns
projected target latents with the stored source eigenstructure through a
per-direction symmetric KL divergence and anchors the model to the stored
D-optimal labeled samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from . import binio
from .numkit import NumericError, ShapeError
from .srcstats import DOptimalSubset, SourceStats, importance_weights
from .surrogate import (Batch, SurrogateModel, ValidationError, loss_and_grads, make_optimizer,
                        sigmoid, softplus, VAR_FLOOR)

VAR_EPS = 1e-8
METHODS = ("satts", "ssa", "tent", "none")
ALPHA_MODES = ("scaled", "weighted")


class InsufficientBatchError(ValueError):
    pass


@dataclass
class AdaptationConfig:
    method: str = "satts"
    lam: float | None = None  # None: m / batch_size
    lr: float = 0.01
    batch_size: int = 64
    alpha_mode: str = "weighted"
    ssa_top_k: int | None = None  # None: half the latent dimension
    directions: str = "retained"  # align the r retained principal directions, or "all" C
    max_steps: int | None = None
    optimizer: str = "sgd"
    seed: int = 0

    def validate(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValidationError(f"unknown alpha mode {self.alpha_mode!r}")
        if self.lam is not None and self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.lr < 0:
            raise ValidationError("learning rate must be >= 0")
        if self.batch_size < 2:
            raise ValidationError("batch size must be >= 2")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValidationError("max_steps must be >= 0")
        if self.directions not in ("retained", "all"):
            raise ValidationError(f"unknown direction set {self.directions!r}")
        return self

    def satts_top_k(self, stats: SourceStats) -> int:
        return stats.r if self.directions == "retained" else stats.dim

    def resolved_lam(self, m: int) -> float:
        return m / self.batch_size if self.lam is None else self.lam


@dataclass
class ProjectedTargetStats:
    mean: np.ndarray
    var: np.ndarray


@dataclass
class StepRecord:
    step: int
    kl: float
    rsrc: float
    total: float
    rolled_back: bool = False


@dataclass
class AdaptTrace:
    records: list[StepRecord] = field(default_factory=list)
    # snapshots[0] is the state before any update; snapshots[t] after step t
    snapshots: list[dict] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.records)

    def to_text(self) -> str:
        lines = ["step\tL_KL\tR_src\tL_TTA"]
        for r in self.records:
            lines.append(f"{r.step}\t{r.kl:.17g}\t{r.rsrc:.17g}\t{r.total:.17g}")
        return "\n".join(lines) + "\n"

    def snapshot_bytes(self) -> bytes:
        """Per-step snapshots of the adaptable parameters, keyed by step."""
        w = binio.Writer()
        w.u32(len(self.snapshots))
        for step, snap in enumerate(self.snapshots):
            w.u64(step)
            w.json([[n, list(v.shape)] for n, v in snap.items()])
            for v in snap.values():
                w.array(v)
        return binio.seal(b"STTSNAP1", 1, w.getvalue())


# ------------------------------------------------------------------ alignment


def _direction_setup(stats: SourceStats, alpha_mode: str, top_k: int | None = None):
    """Projection basis, per-column feature scale, reference variances and summand weights."""
    if stats.alpha is None:
        raise ValidationError("source statistics carry no importance weights")
    k = stats.dim if top_k is None else top_k
    V = stats.eigenvectors[:, :k]
    lam = np.maximum(stats.eigenvalues[:k], VAR_EPS)
    alpha = stats.alpha[:k]
    if alpha_mode == "scaled":
        return V, alpha, alpha * alpha * lam, np.ones(k)
    if alpha_mode == "weighted":
        return V, np.ones(k), lam, alpha
    raise ValidationError(f"unknown alpha mode {alpha_mode!r}")


def project_target(Z_tgt, stats: SourceStats, alpha_mode: str = "scaled", top_k: int | None = None):
    """Center target latents with the source mean and rotate them onto the source axes.

    In ``scaled`` mode each projected column is multiplied by its importance
    weight; ``weighted`` mode leaves the projection unscaled.
    """
    Z = np.atleast_2d(np.asarray(Z_tgt, dtype=np.float64))
    if Z.shape[0] < 2:
        raise InsufficientBatchError("projected statistics need a batch of at least two samples")
    if Z.shape[1] != stats.dim:
        raise ShapeError(f"latent dim {Z.shape[1]} != statistics dim {stats.dim}")
    V, scale, _, _ = _direction_setup(stats, alpha_mode, top_k)
    zt = (Z - stats.mean) @ V * scale
    mu = zt.mean(axis=0)
    var = np.maximum(zt.var(axis=0), VAR_EPS)
    return zt, ProjectedTargetStats(mean=mu, var=var)


def _sym_kl_terms(mu, var, ref):
    return (mu * mu + ref) / var + (mu * mu + var) / ref - 2.0


def kl_alignment_loss(proj: ProjectedTargetStats, stats: SourceStats, alpha_mode: str = "scaled",
                      top_k: int | None = None) -> float:
    _, _, ref, weight = _direction_setup(stats, alpha_mode, top_k)
    if proj.mean.shape != ref.shape:
        raise ShapeError("projected statistics and source statistics disagree in dimension")
    val = 0.5 * float(np.sum(weight * _sym_kl_terms(proj.mean, proj.var, ref)))
    if not math.isfinite(val):
        raise NumericError("non-finite alignment loss")
    return val


def kl_loss_and_grad(Z_tgt, stats: SourceStats, alpha_mode: str = "scaled", top_k: int | None = None):
    """Alignment loss and its exact gradient w.r.t. the target latents (through batch statistics)."""
    Z = np.atleast_2d(np.asarray(Z_tgt, dtype=np.float64))
    B = Z.shape[0]
    if B < 2:
        raise InsufficientBatchError("alignment needs a batch of at least two samples")
    V, scale, ref, weight = _direction_setup(stats, alpha_mode, top_k)
    zt = (Z - stats.mean) @ V * scale
    mu = zt.mean(axis=0)
    raw_var = zt.var(axis=0)
    var = np.maximum(raw_var, VAR_EPS)
    val = 0.5 * float(np.sum(weight * _sym_kl_terms(mu, var, ref)))
    if not math.isfinite(val):
        raise NumericError("non-finite alignment loss")
    d_mu = weight * mu * (1.0 / var + 1.0 / ref)
    d_var = 0.5 * weight * (1.0 / ref - (mu * mu + ref) / (var * var))
    d_var = np.where(raw_var > VAR_EPS, d_var, 0.0)
    d_zt = (d_mu + 2.0 * d_var * (zt - mu)) / B
    return val, (d_zt * scale) @ V.T


# ---------------------------------------------------------------- source risk


def source_risk(model: SurrogateModel, subset: DOptimalSubset) -> float:
    """Mean squared 2-norm residual over the stored labeled samples."""
    if subset.m == 0:
        raise ValidationError("empty subset")
    pred = model.predict(subset.inputs)
    return float(np.mean(np.sum((pred - subset.targets) ** 2, axis=1)))


def satts_hook(B: int, stats: SourceStats, subset: DOptimalSubset, lam: float, alpha_mode: str,
               top_k: int | None = None, parts: dict | None = None):
    """Composite loss over ``[target batch; subset inputs]`` fed jointly in one pass."""
    def hook(Z, Yraw):
        kl, dZt = kl_loss_and_grad(Z[:B], stats, alpha_mode, top_k)
        dZ = np.zeros_like(Z)
        dZ[:B] = dZt
        dY = None
        rsrc = 0.0
        if subset.m:
            K = subset.targets.shape[1]
            R = Yraw[B:, :K] - subset.targets
            rsrc = float(np.mean(np.sum(R * R, axis=1)))
            if lam > 0:
                dY = np.zeros_like(Yraw)
                dY[B:, :K] = lam * 2.0 * R / subset.m
        if parts is not None:
            parts.update(kl=kl, rsrc=rsrc)
        return kl + lam * rsrc, dZ, dY

    return hook


def satts_loss_and_grads(model, x_tgt, stats, subset, lam, alpha_mode="scaled", top_k=None):
    parts: dict = {}
    x = np.vstack([np.atleast_2d(x_tgt), subset.inputs]) if subset.m else np.atleast_2d(x_tgt)
    hook = satts_hook(np.atleast_2d(x_tgt).shape[0], stats, subset, lam, alpha_mode, top_k, parts)
    total, grads = loss_and_grads(model, Batch(x), hook, "adaptable")
    return total, parts["kl"], parts["rsrc"], grads


# ------------------------------------------------------------------------ tent


def tent_hook(K: int):
    """Mean Gaussian predictive entropy ``0.5 * sum_k log(2 pi e var_k)`` over the batch."""

    def hook(Z, Yraw):
        B = Yraw.shape[0]
        s = Yraw[:, K:]
        v = softplus(s) + VAR_FLOOR
        val = 0.5 * float(np.sum(np.log(2.0 * np.pi * np.e * v))) / B
        dY = np.zeros_like(Yraw)
        dY[:, K:] = 0.5 / v * sigmoid(s) / B
        return val, None, dY

    return hook


# ----------------------------------------------------------------------- steps


def _apply(model, grads, optimizer, lr):
    before = model.snapshot()
    optimizer.step(model, grads, lr)
    if not all(np.all(np.isfinite(v)) for v in model.params.values()):
        model.restore(before)
        return True
    return False


def _failed(step):
    return StepRecord(step=step, kl=math.nan, rsrc=math.nan, total=math.nan, rolled_back=True)


def satts_step(model, x_tgt, stats, subset, cfg: AdaptationConfig, optimizer, step: int = 1) -> StepRecord:
    lam = cfg.resolved_lam(subset.m)
    try:
        total, kl, rsrc, grads = satts_loss_and_grads(model, x_tgt, stats, subset, lam, cfg.alpha_mode,
                                                      cfg.satts_top_k(stats))
    except NumericError:
        return _failed(step)
    rolled = _apply(model, grads, optimizer, cfg.lr)
    return StepRecord(step=step, kl=kl, rsrc=rsrc, total=total, rolled_back=rolled)


def ssa_loss_and_grads(model, x_tgt, stats: SourceStats, top_k: int):
    """Importance-weighted KL over the leading ``top_k`` directions, without any source anchor."""
    if not 1 <= top_k <= stats.dim:
        raise ValidationError(f"ssa_top_k must lie in [1, {stats.dim}]")
    if stats.alpha is None:
        stats = replace(stats, alpha=importance_weights(model.W, stats))

    def hook(Z, Yraw):
        val, dZ = kl_loss_and_grad(Z, stats, "weighted", top_k)
        return val, dZ, None

    return loss_and_grads(model, Batch(x_tgt), hook, "adaptable")


def ssa_step(model, x_tgt, stats, cfg: AdaptationConfig, optimizer, step: int = 1) -> StepRecord:
    top_k = cfg.ssa_top_k or max(1, stats.dim // 2)
    try:
        total, grads = ssa_loss_and_grads(model, x_tgt, stats, top_k)
    except NumericError:
        return _failed(step)
    rolled = _apply(model, grads, optimizer, cfg.lr)
    return StepRecord(step=step, kl=total, rsrc=0.0, total=total, rolled_back=rolled)


def tent_step(model, x_tgt, cfg: AdaptationConfig, optimizer, step: int = 1) -> StepRecord:
    if not model.spec.variance_head:
        raise ValidationError("Tent needs a model with a mean-variance head")
    try:
        total, grads = loss_and_grads(model, Batch(x_tgt), tent_hook(model.spec.output_dim), "adaptable")
    except NumericError:
        return _failed(step)
    rolled = _apply(model, grads, optimizer, cfg.lr)
    return StepRecord(step=step, kl=0.0, rsrc=0.0, total=total, rolled_back=rolled)


# -------------------------------------------------------------------- streams


def batch_stream(x, batch_size: int, seed: int | None = None, drop_last: bool = True):
    """Target inputs cut into consecutive batches, optionally shuffled by ``seed``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    order = np.arange(x.shape[0]) if seed is None else np.random.default_rng(seed).permutation(x.shape[0])
    out = []
    for i in range(0, x.shape[0], batch_size):
        idx = order[i:i + batch_size]
        if len(idx) < 2 or (drop_last and len(idx) < batch_size and out):
            continue
        out.append(x[idx])
    return out


def run_adaptation(model: SurrogateModel, stream: Iterable, stats: SourceStats | None,
                   subset: DOptimalSubset | None, cfg: AdaptationConfig,
                   callback: Callable[[SurrogateModel, StepRecord], bool] | None = None):
    """Online single pass over ``stream``: one update per target batch.

    ``callback(model, record)`` runs after every step; returning True stops
    the pass early. Returns ``(trace, adapted_model)``; the input model is
    not modified.
    """
    cfg.validate()
    model = model.clone()
    trace = AdaptTrace(snapshots=[model.snapshot()])
    if cfg.method == "none":
        return trace, model
    optimizer = make_optimizer(cfg.optimizer)
    for step, xb in enumerate(stream, start=1):
        if cfg.max_steps is not None and step > cfg.max_steps:
            break
        if cfg.method == "satts":
            rec = satts_step(model, xb, stats, subset, cfg, optimizer, step)
        elif cfg.method == "ssa":
            rec = ssa_step(model, xb, stats, cfg, optimizer, step)
        else:
            rec = tent_step(model, xb, cfg, optimizer, step)
        trace.records.append(rec)
        trace.snapshots.append(model.snapshot())
        if callback is not None and callback(model, rec):
            break
    return trace, model
