"""Source statistics carried to test time.

The artifact holds the latent mean and eigenstructure of the source
validation set, the importance weight of every principal direction, and a
small quasi D-optimal labeled subset picked by pivoted QR on whitened
principal components.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import binio
from .numkit import ShapeError, covariance, qr_pivot, sym_eig
from .surrogate import Batch, SurrogateModel, ValidationError

ARTIFACT_MAGIC = b"STTSTAT1"
ARTIFACT_VERSION = 1
ZERO_EIG_REL = 1e-12


class InsufficientDataError(ValueError):
    pass


@dataclass
class SourceStats:
    mean: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    r: int
    tau: float
    alpha: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class DOptimalSubset:
    indices: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray

    @property
    def m(self) -> int:
        return int(self.indices.shape[0])

    def batch(self) -> Batch:
        return Batch(self.inputs, self.targets)


@dataclass
class SourceStatsArtifact:
    stats: SourceStats
    subset: DOptimalSubset
    checkpoint_hash: str
    # Gaussian of the full source-validation latents in the top-r basis (for density ratios)
    latent_mean: np.ndarray
    latent_cov: np.ndarray
    meta: dict = field(default_factory=dict)


def select_components(eigenvalues, tau: float) -> int:
    """Smallest number of leading components whose variance fraction reaches ``tau``."""
    if not 0.0 < tau <= 1.0:
        raise ValidationError("tau must lie in (0, 1]")
    lam = np.asarray(eigenvalues, dtype=np.float64)
    total = lam.sum()
    if total <= 0.0:
        warnings.warn("all source eigenvalues are zero; keeping a single component", stacklevel=2)
        return 1
    frac = np.cumsum(lam) / total
    # tolerance guards tau=1 against cumulative rounding just below one
    return int(min(np.searchsorted(frac, tau - 1e-12) + 1, lam.size))


def fit_source_stats(Z, tau: float = 0.95) -> SourceStats:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise InsufficientDataError("source statistics need at least two latent samples")
    mu, cov = covariance(Z)
    eig = sym_eig(cov)
    r = select_components(eig.eigenvalues, tau)
    return SourceStats(mean=mu, eigenvalues=eig.eigenvalues, eigenvectors=eig.eigenvectors, r=r, tau=tau)


def whiten(Z, stats: SourceStats) -> np.ndarray:
    """Centered latents in the leading ``r`` principal axes, scaled to unit variance.

    Directions with (numerically) zero eigenvalue are dropped.
    """
    lam = stats.eigenvalues[: stats.r]
    keep = lam > ZERO_EIG_REL * max(stats.eigenvalues.max(initial=0.0), 1e-300)
    Zc = np.asarray(Z, dtype=np.float64) - stats.mean
    V = stats.eigenvectors[:, : stats.r][:, keep]
    return Zc @ V / np.sqrt(lam[keep])


def doptimal_select(Z, stats: SourceStats, m: int) -> np.ndarray:
    """Indices of ``m`` samples approximately maximizing the whitened Gram determinant."""
    Z = np.asarray(Z, dtype=np.float64)
    N = Z.shape[0]
    if not 1 <= m <= N:
        raise ValidationError(f"subset size m={m} must lie in [1, {N}]")
    Y = whiten(Z, stats)
    if Y.shape[1] == 0:
        warnings.warn("no non-degenerate source direction; using the first m samples", stacklevel=2)
        return np.arange(m, dtype=np.int64)
    return qr_pivot(Y.T)[:m]


def importance_weights(W, stats: SourceStats) -> np.ndarray:
    """``1 + ||W v_k||`` for every principal direction ``v_k``."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if W.shape[1] != stats.dim:
        raise ShapeError(f"decoder has {W.shape[1]} columns, statistics have dim {stats.dim}")
    return 1.0 + np.linalg.norm(W @ stats.eigenvectors, axis=0)


def build_artifact(model: SurrogateModel, source_val: Batch, tau: float = 0.95, m: int = 8,
                   checkpoint_hash: str = "") -> SourceStatsArtifact:
    if source_val.targets is None:
        raise ValidationError("artifact construction needs a labeled source validation set")
    Z, _ = model.forward(source_val.inputs)
    stats = fit_source_stats(Z, tau)
    idx = doptimal_select(Z, stats, m)
    stats = replace(stats, alpha=importance_weights(model.W, stats))
    V = stats.eigenvectors[:, : stats.r]
    lat_mu, lat_cov = covariance((Z - stats.mean) @ V)
    subset = DOptimalSubset(indices=idx, inputs=source_val.inputs[idx].copy(),
                            targets=source_val.targets[idx].copy())
    return SourceStatsArtifact(stats=stats, subset=subset, checkpoint_hash=checkpoint_hash,
                               latent_mean=lat_mu, latent_cov=lat_cov,
                               meta={"n_source": int(Z.shape[0]), "m": int(m), "tau": float(tau)})


# ------------------------------------------------------------------------- file


def artifact_bytes(art: SourceStatsArtifact) -> bytes:
    s = art.stats
    if s.alpha is None:
        raise ValidationError("artifact statistics are missing importance weights")
    w = binio.Writer()
    sections = [
        ("mean", s.mean), ("eigenvalues", s.eigenvalues), ("eigenvectors", s.eigenvectors),
        ("r", np.array([s.r], dtype=np.int64)), ("tau", np.array([s.tau])), ("alpha", s.alpha),
        ("indices", art.subset.indices.astype(np.int64)), ("subset_inputs", art.subset.inputs),
        ("subset_targets", art.subset.targets), ("latent_mean", art.latent_mean),
        ("latent_cov", art.latent_cov),
    ]
    w.u32(len(sections) + 2)
    for name, arr in sections:
        w.text(name)
        arr = np.asarray(arr)
        if arr.dtype.kind == "i":
            w.text("i8")
            w.array(arr, "<i8")
        else:
            w.text("f8")
            w.array(arr, "<f8")
    w.text("checkpoint_hash")
    w.text("utf8")
    w.text(art.checkpoint_hash)
    w.text("meta")
    w.text("json")
    w.json(art.meta)
    return binio.seal(ARTIFACT_MAGIC, ARTIFACT_VERSION, w.getvalue())


def artifact_from_bytes(data: bytes) -> SourceStatsArtifact:
    _, body = binio.open_sealed(ARTIFACT_MAGIC, data, ARTIFACT_VERSION)
    r = binio.Reader(body)
    out = {}
    for _ in range(r.u32()):
        name = r.text()
        kind = r.text()
        if kind == "f8":
            out[name] = r.array("<f8")
        elif kind == "i8":
            out[name] = r.array("<i8")
        elif kind == "utf8":
            out[name] = r.text()
        elif kind == "json":
            out[name] = r.json()
        else:
            raise binio.FormatError(f"unknown section kind {kind!r}")
    r.done()
    try:
        stats = SourceStats(mean=out["mean"], eigenvalues=out["eigenvalues"], eigenvectors=out["eigenvectors"],
                            r=int(out["r"][0]), tau=float(out["tau"][0]), alpha=out["alpha"])
        subset = DOptimalSubset(indices=out["indices"], inputs=out["subset_inputs"], targets=out["subset_targets"])
        return SourceStatsArtifact(stats=stats, subset=subset, checkpoint_hash=out["checkpoint_hash"],
                                   latent_mean=out["latent_mean"], latent_cov=out["latent_cov"],
                                   meta=out.get("meta", {}))
    except KeyError as exc:
        raise binio.FormatError(f"artifact is missing section {exc}") from exc


def save_artifact(art: SourceStatsArtifact, path) -> str:
    data = artifact_bytes(art)
    binio.write_file(path, data)
    return binio.sha256_bytes(data)


def load_artifact(path, checkpoint_hash: str | None = None) -> SourceStatsArtifact:
    art = artifact_from_bytes(Path(path).read_bytes())
    if checkpoint_hash is not None and art.checkpoint_hash and art.checkpoint_hash != checkpoint_hash:
        raise binio.FormatError("artifact was built from a different checkpoint")
    return art
