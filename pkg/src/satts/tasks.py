"""Synthetic shifted-regression tasks and their dataset file format."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .surrogate import Batch, ValidationError

DATA_MAGIC = b"STTDATA1"
DATA_VERSION = 1
SPLITS = ("source-train", "source-val", "target-test")

# fixed ranges of the parameters that do not shift
BUMP_FIXED = {"amplitude": (0.1, 2.0), "width": (0.15, 0.25)}
HEAT_FIXED = {"source": (0.0, 4.0), "t_left": (0.0, 1.0), "t_right": (0.0, 1.0)}


@dataclass
class TaskConfig:
    kind: str = "bump"
    grid_size: int = 128
    source_range: tuple[float, float] = (0.2, 0.5)
    target_range: tuple[float, float] = (0.55, 0.65)
    n_train: int = 1024
    n_val: int = 256
    n_test: int = 640
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.source_range = tuple(float(v) for v in self.source_range)
        self.target_range = tuple(float(v) for v in self.target_range)
        if self.kind == "bump-field":
            self.kind = "bump"

    def validate(self):
        if self.kind not in ("bump", "heat-1d"):
            raise ValidationError(f"unknown task kind {self.kind!r}")
        if self.grid_size < 16:
            raise ValidationError("grid size must be >= 16")
        for name, (lo, hi) in (("source", self.source_range), ("target", self.target_range)):
            if not lo < hi:
                raise ValidationError(f"{name} range must satisfy lo < hi")
        (s0, s1), (t0, t1) = self.source_range, self.target_range
        if s0 < t1 and t0 < s1:
            raise ValidationError("source and target ranges overlap on the shifted parameter")
        if self.kind == "heat-1d" and min(s0, t0) <= 0:
            raise ValidationError("conductivity ranges must be positive")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValidationError("every split needs at least one sample")
        if self.noise < 0:
            raise ValidationError("noise must be >= 0")
        return self

    def to_dict(self):
        d = asdict(self)
        d["source_range"] = list(self.source_range)
        d["target_range"] = list(self.target_range)
        return d

    @property
    def input_dim(self) -> int:
        return 3 if self.kind == "bump" else 4


@dataclass
class Normalization:
    """Per-parameter input z-scoring and per-field output z-scoring, from source-train only."""
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: float
    out_std: float

    @classmethod
    def fit(cls, inputs, targets):
        std = inputs.std(axis=0)
        return cls(in_mean=inputs.mean(axis=0), in_std=np.where(std > 0, std, 1.0),
                   out_mean=float(targets.mean()), out_std=float(targets.std()) or 1.0)

    def to_dict(self):
        return {"in_mean": self.in_mean.tolist(), "in_std": self.in_std.tolist(),
                "out_mean": self.out_mean, "out_std": self.out_std}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["in_mean"], dtype=np.float64), np.asarray(d["in_std"], dtype=np.float64),
                   float(d["out_mean"]), float(d["out_std"]))

    def x(self, inputs):
        return (inputs - self.in_mean) / self.in_std

    def y(self, targets):
        return (targets - self.out_mean) / self.out_std


@dataclass
class Dataset:
    inputs: np.ndarray  # raw simulation parameters
    targets: np.ndarray | None  # raw fields; None when labels are withheld
    domain: str
    norm: Normalization
    task: TaskConfig = field(default_factory=TaskConfig)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def labeled(self) -> bool:
        return self.targets is not None

    def batch(self) -> Batch:
        """Normalized model-space view."""
        return Batch(self.norm.x(self.inputs), None if self.targets is None else self.norm.y(self.targets))

    def without_labels(self) -> "Dataset":
        return Dataset(self.inputs, None, self.domain, self.norm, self.task)


def grid(K: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, K)


def bump_field(params, K: int) -> np.ndarray:
    """``A exp(-(x - c)^2 / (2 s^2))`` on the unit grid; params rows are (A, c, s)."""
    p = np.atleast_2d(params)
    x = grid(K)
    A, c, s = p[:, :1], p[:, 1:2], p[:, 2:3]
    return A * np.exp(-((x - c) ** 2) / (2.0 * s * s))


def heat_field(params, K: int) -> np.ndarray:
    """Steady 1-D conduction ``-(k u')' = q`` on [0, 1] with Dirichlet ends.

    params rows are (k, q, T0, T1); the closed form is
    ``u = T0 + (T1 - T0) x + q x (1 - x) / (2 k)``.
    """
    p = np.atleast_2d(params)
    x = grid(K)
    k, q, t0, t1 = (p[:, i:i + 1] for i in range(4))
    return t0 + (t1 - t0) * x + q * x * (1.0 - x) / (2.0 * k)


def _sample_params(cfg: TaskConfig, shifted_range, n, rng):
    lo, hi = shifted_range
    if cfg.kind == "bump":
        A = rng.uniform(*BUMP_FIXED["amplitude"], n)
        c = rng.uniform(lo, hi, n)
        s = rng.uniform(*BUMP_FIXED["width"], n)
        return np.column_stack([A, c, s])
    k = rng.uniform(lo, hi, n)
    q = rng.uniform(*HEAT_FIXED["source"], n)
    t0 = rng.uniform(*HEAT_FIXED["t_left"], n)
    t1 = rng.uniform(*HEAT_FIXED["t_right"], n)
    return np.column_stack([k, q, t0, t1])


def simulate(cfg: TaskConfig, params) -> np.ndarray:
    return bump_field(params, cfg.grid_size) if cfg.kind == "bump" else heat_field(params, cfg.grid_size)


def gen_task(cfg: TaskConfig) -> dict[str, Dataset]:
    """Source-train, source-val and target-test splits, deterministic in ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    raw = {}
    for split, n, rng_range in (("source-train", cfg.n_train, cfg.source_range),
                                ("source-val", cfg.n_val, cfg.source_range),
                                ("target-test", cfg.n_test, cfg.target_range)):
        p = _sample_params(cfg, rng_range, n, rng)
        raw[split] = (p, _noisy(cfg, p, rng))
    norm = Normalization.fit(*raw["source-train"])
    return {s: Dataset(p, y, s, norm, cfg) for s, (p, y) in raw.items()}


def _noisy(cfg: TaskConfig, params, rng) -> np.ndarray:
    clean = simulate(cfg, params)
    amp = np.abs(clean).max(axis=1, keepdims=True)
    return clean + cfg.noise * amp * rng.standard_normal(clean.shape)


def source_draw(cfg: TaskConfig, n: int, seed: int, norm: Normalization, domain: str = "target-test") -> Dataset:
    """Fresh labeled draw from the source range under an existing normalization (a no-shift target)."""
    if n < 1:
        raise ValidationError("draw needs at least one sample")
    rng = np.random.default_rng(seed)
    p = _sample_params(cfg, cfg.source_range, n, rng)
    return Dataset(p, _noisy(cfg, p, rng), domain, norm, cfg)


# ------------------------------------------------------------------------ file


def dataset_bytes(ds: Dataset) -> bytes:
    cfg = ds.task
    header = {"kind": cfg.kind, "K": int(cfg.grid_size), "P": int(ds.inputs.shape[1]),
              "count": int(len(ds)), "domain": ds.domain, "seed": cfg.seed, "labeled": ds.labeled,
              "source_range": list(cfg.source_range), "target_range": list(cfg.target_range),
              "task": cfg.to_dict(), "normalization": ds.norm.to_dict()}
    w = binio.Writer()
    w.json(header)
    w.f64(ds.inputs)
    if ds.labeled:
        w.f64(ds.targets)
    return binio.seal(DATA_MAGIC, DATA_VERSION, w.getvalue())


def dataset_from_bytes(data: bytes) -> Dataset:
    _, body = binio.open_sealed(DATA_MAGIC, data, DATA_VERSION)
    r = binio.Reader(body)
    h = r.json()
    try:
        n, P, K = int(h["count"]), int(h["P"]), int(h["K"])
        inputs = r.f64(n * P).reshape(n, P)
        targets = r.f64(n * K).reshape(n, K) if h.get("labeled", True) else None
        r.done()
        task = TaskConfig(**h["task"])
        return Dataset(inputs, targets, h["domain"], Normalization.from_dict(h["normalization"]), task)
    except (KeyError, TypeError) as exc:
        raise binio.FormatError(f"malformed dataset header: {exc}") from exc


def save_dataset(ds: Dataset, path) -> str:
    data = dataset_bytes(ds)
    binio.write_file(path, data)
    return binio.sha256_bytes(data)


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
