"""Desk-scale surrogate ``f = g o phi`` with hand-written reverse-mode gradients.

``phi`` is a stack of ``Linear -> LayerNorm -> activation`` blocks followed by
a linear projection to the latent space (plus an optional latent LayerNorm).
``g`` is a single affine map, so predictions are exactly ``Z W^T + b``.

Only the LayerNorm scales and shifts inside ``phi`` are adaptable at test
time; everything else, the whole decoder included, is frozen.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import binio
from .numkit import NumericError, ShapeError

LN_EPS = 1e-5
VAR_FLOOR = 1e-6  # added to softplus variances of the mean-variance head
CHECKPOINT_MAGIC = b"STTCKPT1"
CHECKPOINT_VERSION = 1


class ValidationError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, msg, epoch):
        super().__init__(f"{msg} (epoch {epoch})")
        self.epoch = epoch


# --------------------------------------------------------------------------- spec


@dataclass(frozen=True)
class SurrogateSpec:
    input_dim: int
    latent_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "gelu"
    latent_norm: bool = False
    variance_head: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def has_latent_norm(self) -> bool:
        # without hidden blocks phi is a layer-normalized affine map
        return self.latent_norm or not self.hidden

    @property
    def n_norm_sites(self) -> int:
        return len(self.hidden) + int(self.has_latent_norm)

    @property
    def decoder_rows(self) -> int:
        return self.output_dim * (2 if self.variance_head else 1)

    def validate(self):
        if self.input_dim < 1:
            raise ValidationError("input_dim must be >= 1")
        if self.latent_dim < 2:
            raise ValidationError("latent_dim must be >= 2")
        if self.output_dim < 1:
            raise ValidationError("output_dim must be >= 1")
        if any(h < 2 for h in self.hidden):
            raise ValidationError("hidden widths must be >= 2 (layer norm needs two features)")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.n_norm_sites < 1:
            raise ValidationError("phi needs at least one layer-norm site")
        return self

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "hidden": tuple(d["hidden"])})


# ------------------------------------------------------------------ activations

_SQRT_2_PI = math.sqrt(2.0 / math.pi)


def _gelu(x):
    u = _SQRT_2_PI * (x + 0.044715 * x**3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _SQRT_2_PI * (1.0 + 3 * 0.044715 * x * x)
    return y, dy


def _tanh(x):
    y = np.tanh(x)
    return y, 1.0 - y * y


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    y = x * s
    return y, s * (1.0 + x * (1.0 - s))


ACTIVATIONS = {"gelu": _gelu, "tanh": _tanh, "silu": _silu}


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ------------------------------------------------------------------------ model


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        if self.targets is not None:
            self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
            if self.targets.shape[0] != self.inputs.shape[0]:
                raise ShapeError("inputs and targets disagree on the number of rows")
            if not np.all(np.isfinite(self.targets)):
                raise NumericError("non-finite targets")
        if not np.all(np.isfinite(self.inputs)):
            raise NumericError("non-finite inputs")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        return Batch(self.inputs[idx], None if self.targets is None else self.targets[idx])


class SurrogateModel:
    def __init__(self, spec: SurrogateSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        # training state carried through checkpoints (raw weights, optimizer moments)
        self.extra: dict[str, dict[str, np.ndarray]] = {}
        self.meta: dict = {}

    # partition -------------------------------------------------------------

    @property
    def adaptable(self) -> list[str]:
        return [n for n in self.params if n.startswith("phi.") and ".ln." in n]

    @property
    def frozen(self) -> list[str]:
        ad = set(self.adaptable)
        return [n for n in self.params if n not in ad]

    def resolve(self, which) -> list[str]:
        if which is None or which == "all":
            return list(self.params)
        if which == "adaptable":
            return self.adaptable
        names = list(which)
        unknown = set(names) - set(self.params)
        if unknown:
            raise ValidationError(f"unknown parameters {sorted(unknown)}")
        return names

    @property
    def W(self):
        return self.params["g.weight"][: self.spec.output_dim]

    @property
    def b(self):
        return self.params["g.bias"][: self.spec.output_dim]

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> "SurrogateModel":
        m = SurrogateModel(self.spec, {k: v.copy() for k, v in self.params.items()})
        m.extra = {g: {k: v.copy() for k, v in d.items()} for g, d in self.extra.items()}
        m.meta = json.loads(json.dumps(self.meta))
        return m

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        return {n: self.params[n].copy() for n in self.resolve(names or "adaptable")}

    def restore(self, snap: dict[str, np.ndarray]):
        for n, v in snap.items():
            self.params[n] = v.copy()

    # forward / backward ----------------------------------------------------

    def _layers(self):
        for i in range(len(self.spec.hidden)):
            yield f"phi.{i}", True
        yield "phi.out", self.spec.has_latent_norm

    def forward_raw(self, x, keep_cache=False):
        """Returns ``(Z, Yraw, cache)``; ``Yraw`` has ``2K`` columns for a variance head."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.spec.input_dim:
            raise ShapeError(f"input has {x.shape[1]} columns, model expects {self.spec.input_dim}")
        act = ACTIVATIONS[self.spec.activation]
        cache = []
        h = x
        n_hidden = len(self.spec.hidden)
        for li, (name, has_ln) in enumerate(self._layers()):
            W, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
            a = h @ W.T + b
            entry = {"name": name, "in": h}
            if has_ln:
                mu = a.mean(axis=1, keepdims=True)
                var = a.var(axis=1, keepdims=True)
                rstd = 1.0 / np.sqrt(var + LN_EPS)
                xhat = (a - mu) * rstd
                a = self.params[f"{name}.ln.gamma"] * xhat + self.params[f"{name}.ln.beta"]
                entry.update(xhat=xhat, rstd=rstd)
            if li < n_hidden:
                a, da = act(a)
                entry["dact"] = da
            if not np.all(np.isfinite(a)):
                raise NumericError(f"non-finite activations in layer {name}")
            if keep_cache:
                cache.append(entry)
            h = a
        Z = h
        Yraw = Z @ self.params["g.weight"].T + self.params["g.bias"]
        if not np.all(np.isfinite(Yraw)):
            raise NumericError("non-finite activations in layer g")
        return Z, Yraw, (cache, Z)

    def forward(self, x):
        Z, Yraw, _ = self.forward_raw(x)
        return Z, Yraw[:, : self.spec.output_dim]

    def predict(self, x):
        return self.forward(x)[1]

    def predict_variance(self, Yraw):
        if not self.spec.variance_head:
            raise ValidationError("model has no variance head")
        return softplus(Yraw[:, self.spec.output_dim:]) + VAR_FLOOR

    def backward(self, cache, dZ=None, dYraw=None, names=None) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its partials w.r.t. latents and raw outputs."""
        layers, Z = cache
        want = set(self.resolve(names))
        grads: dict[str, np.ndarray] = {}
        g = np.zeros_like(Z) if dZ is None else np.array(dZ, dtype=np.float64)
        if dYraw is not None:
            if "g.weight" in want:
                grads["g.weight"] = dYraw.T @ Z
            if "g.bias" in want:
                grads["g.bias"] = dYraw.sum(axis=0)
            g = g + dYraw @ self.params["g.weight"]
        n_hidden = len(self.spec.hidden)
        for li in range(len(layers) - 1, -1, -1):
            e = layers[li]
            name = e["name"]
            if li < n_hidden:
                g = g * e["dact"]
            if "xhat" in e:
                xhat, rstd = e["xhat"], e["rstd"]
                if f"{name}.ln.gamma" in want:
                    grads[f"{name}.ln.gamma"] = np.sum(g * xhat, axis=0)
                if f"{name}.ln.beta" in want:
                    grads[f"{name}.ln.beta"] = np.sum(g, axis=0)
                gx = g * self.params[f"{name}.ln.gamma"]
                g = rstd * (gx - gx.mean(axis=1, keepdims=True)
                            - xhat * np.mean(gx * xhat, axis=1, keepdims=True))
            if f"{name}.weight" in want:
                grads[f"{name}.weight"] = g.T @ e["in"]
            if f"{name}.bias" in want:
                grads[f"{name}.bias"] = g.sum(axis=0)
            if li > 0:
                g = g @ self.params[f"{name}.weight"]
        return {n: grads.get(n, np.zeros_like(self.params[n])) for n in self.resolve(names)}


def build(spec: SurrogateSpec) -> SurrogateModel:
    """Deterministic fan-in uniform initialization; LayerNorm starts at identity."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    params: dict[str, np.ndarray] = {}
    fan_in = spec.input_dim
    widths = list(spec.hidden) + [spec.latent_dim]
    for i, width in enumerate(widths):
        name = f"phi.{i}" if i < len(spec.hidden) else "phi.out"
        bound = 1.0 / math.sqrt(fan_in)
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(width, fan_in))
        params[f"{name}.bias"] = rng.uniform(-bound, bound, size=width)
        if i < len(spec.hidden) or spec.has_latent_norm:
            params[f"{name}.ln.gamma"] = np.ones(width)
            params[f"{name}.ln.beta"] = np.zeros(width)
        fan_in = width
    bound = 1.0 / math.sqrt(spec.latent_dim)
    params["g.weight"] = rng.uniform(-bound, bound, size=(spec.decoder_rows, spec.latent_dim))
    params["g.bias"] = rng.uniform(-bound, bound, size=spec.decoder_rows)
    return SurrogateModel(spec, params)


# ----------------------------------------------------------------------- losses

# A loss hook maps (Z, Yraw) to (value, dL/dZ or None, dL/dYraw or None).
LossHook = Callable[[np.ndarray, np.ndarray], tuple]


def mse_hook(targets, K) -> LossHook:
    """Mean over all entries of the squared error of the mean predictions."""

    def hook(Z, Yraw):
        R = Yraw[:, :K] - targets
        n = R.size
        dY = np.zeros_like(Yraw)
        dY[:, :K] = 2.0 * R / n
        return float(np.sum(R * R) / n), None, dY

    return hook


def gaussian_nll_hook(targets, K) -> LossHook:
    """Mean Gaussian negative log-likelihood for the mean-variance head (constant dropped)."""

    def hook(Z, Yraw):
        mu = Yraw[:, :K]
        s = Yraw[:, K:]
        v = softplus(s) + VAR_FLOOR
        R = mu - targets
        n = R.size
        val = 0.5 * np.sum(np.log(v) + R * R / v) / n
        dv = 0.5 * (1.0 / v - R * R / (v * v)) / n
        dY = np.empty_like(Yraw)
        dY[:, :K] = R / v / n
        dY[:, K:] = dv * sigmoid(s)
        return float(val), None, dY

    return hook


def loss_and_grads(model: SurrogateModel, batch: Batch, loss="mse", params="all"):
    """Loss value and exact gradients for the parameters selected by ``params``.

    ``loss`` is ``"mse"``, ``"nll"`` (variance-head models) or a hook callable
    receiving the latents and raw outputs of the whole batch.
    """
    K = model.spec.output_dim
    if loss == "mse":
        if batch.targets is None:
            raise ValidationError("mse loss needs targets")
        hook = mse_hook(batch.targets, K)
    elif loss == "nll":
        if batch.targets is None:
            raise ValidationError("nll loss needs targets")
        hook = gaussian_nll_hook(batch.targets, K)
    elif callable(loss):
        hook = loss
    else:
        raise ValidationError(f"unknown loss {loss!r}")
    Z, Yraw, cache = model.forward_raw(batch.inputs, keep_cache=True)
    value, dZ, dY = hook(Z, Yraw)
    if not np.isfinite(value):
        raise NumericError("non-finite loss")
    return value, model.backward(cache, dZ, dY, names=params)


# ------------------------------------------------------------------- optimizers


class SGD:
    name = "sgd"

    def step(self, model: SurrogateModel, grads: dict, lr: float):
        if lr < 0:
            raise ValidationError("learning rate must be >= 0")
        for n, g in grads.items():
            model.params[n] = model.params[n] - lr * g


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    name = "adam"

    def step(self, model: SurrogateModel, grads: dict, lr: float):
        if lr < 0:
            raise ValidationError("learning rate must be >= 0")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for n, g in grads.items():
            m = self.m.get(n)
            if m is None:
                m = self.m[n] = np.zeros_like(g)
                self.v[n] = np.zeros_like(g)
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = model.params[n]
            if self.weight_decay:
                p = p - lr * self.weight_decay * p
            model.params[n] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str):
    if name == "sgd":
        return SGD()
    if name == "adam":
        return Adam()
    raise ValidationError(f"unknown optimizer {name!r}")


def optimizer_step(model, grads, optimizer, lr):
    optimizer.step(model, grads, lr)
    return model, optimizer


# ------------------------------------------------------------------- pretraining


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 300
    patience: int = 100
    batch_size: int = 32
    clip_norm: float = 1.0
    ema_decay: float = 0.95
    seed: int = 0
    loss: str = "mse"

    def validate(self):
        if self.lr < 0:
            raise ValidationError("lr must be >= 0")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.patience < 0 or (self.epochs and self.patience > self.epochs):
            raise ValidationError("patience must lie in [0, epochs]")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValidationError("ema_decay must lie in [0, 1)")
        if self.loss not in ("mse", "nll"):
            raise ValidationError(f"unknown training loss {self.loss!r}")
        return self


def cosine_lr(base, step, total):
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def evaluate_loss(model, batch: Batch, loss="mse") -> float:
    Z, Yraw, _ = model.forward_raw(batch.inputs)
    K = model.spec.output_dim
    hook = mse_hook(batch.targets, K) if loss == "mse" else gaussian_nll_hook(batch.targets, K)
    return hook(Z, Yraw)[0]


def pretrain(model: SurrogateModel, train: Batch, val: Batch, cfg: TrainConfig, resume=False):
    """Train on the source split; returns the best-validation EMA weights and the history.

    The returned model's ``params`` are the EMA weights (used for evaluation);
    the raw weights and Adam moments ride along in ``model.extra`` so training
    can be resumed from a checkpoint.
    """
    cfg.validate()
    if len(train) == 0 or len(val) == 0:
        raise ValidationError("training and validation sets must be non-empty")
    if train.targets is None or val.targets is None:
        raise ValidationError("pretraining needs labeled data")
    if cfg.loss == "nll" and not model.spec.variance_head:
        raise ValidationError("nll training needs a variance-head model")

    state = model.meta.get("train", {}) if resume else {}
    start = int(state.get("epoch", 0))
    raw = model.clone()
    if resume and "raw" in model.extra:
        raw.restore(model.extra["raw"])
    ema = {n: model.params[n].copy() for n in model.params}
    opt = Adam(weight_decay=cfg.weight_decay)
    if resume and "adam.m" in model.extra:
        opt.m = {k: v.copy() for k, v in model.extra["adam.m"].items()}
        opt.v = {k: v.copy() for k, v in model.extra["adam.v"].items()}
        opt.t = int(state.get("adam_t", 0))
    best_val = float(state.get("best_val", math.inf))
    since_best = int(state.get("since_best", 0))
    best = {n: v.copy() for n, v in ema.items()}
    history = []

    n = len(train)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    step = start * steps_per_epoch
    evalm = model.clone()
    for epoch in range(start, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        perm = rng.permutation(n)
        tr_loss = 0.0
        for s in range(steps_per_epoch):
            idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            loss, grads = loss_and_grads(raw, train.subset(idx), cfg.loss)
            tr_loss += loss * len(idx)
            if cfg.clip_norm:
                gn = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if gn > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / gn) for k, g in grads.items()}
            lr = cosine_lr(cfg.lr, step, total)
            opt.step(raw, grads, lr)
            step += 1
            d = cfg.ema_decay
            for k in ema:
                ema[k] = d * ema[k] + (1.0 - d) * raw.params[k]
        evalm.restore(ema)
        try:
            val_loss = evaluate_loss(evalm, val, cfg.loss)
        except NumericError:
            val_loss = math.nan
        if not math.isfinite(val_loss):
            raise TrainingError("validation loss diverged", epoch)
        history.append({"epoch": epoch + 1, "train_loss": tr_loss / n, "val_loss": val_loss,
                        "lr": cosine_lr(cfg.lr, step, total)})
        if val_loss < best_val:
            best_val = val_loss
            since_best = 0
            best = {k: v.copy() for k, v in ema.items()}
        else:
            since_best += 1
            if since_best > cfg.patience:
                start = epoch + 1
                break
        start = epoch + 1

    out = model.clone()
    out.restore(best)
    out.extra = {
        "raw": {k: v.copy() for k, v in raw.params.items()},
        "adam.m": {k: v.copy() for k, v in opt.m.items()},
        "adam.v": {k: v.copy() for k, v in opt.v.items()},
    }
    out.meta = {**model.meta, "train": {"epoch": start, "adam_t": opt.t,
                                        "best_val": best_val if math.isfinite(best_val) else None,
                                        "since_best": since_best}}
    if out.meta["train"]["best_val"] is None:
        del out.meta["train"]["best_val"]
    return out, history


# ------------------------------------------------------------------ checkpoints


def _groups(model: SurrogateModel):
    groups = [("params", model.params)]
    for g in sorted(model.extra):
        groups.append((g, model.extra[g]))
    return groups


def checkpoint_bytes(model: SurrogateModel) -> bytes:
    header = {
        "spec": model.spec.to_dict(),
        "groups": [[g, [[n, list(a.shape)] for n, a in arrs.items()]] for g, arrs in _groups(model)],
        "meta": model.meta,
    }
    w = binio.Writer()
    w.json(header)
    blobs = [np.asarray(a, dtype=np.float64).ravel() for _, arrs in _groups(model) for a in arrs.values()]
    flat = np.concatenate(blobs) if blobs else np.zeros(0)
    w.u64(flat.size)
    w.f64(flat)
    return binio.seal(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, w.getvalue())


def checkpoint_from_bytes(data: bytes) -> SurrogateModel:
    _, body = binio.open_sealed(CHECKPOINT_MAGIC, data, CHECKPOINT_VERSION)
    r = binio.Reader(body)
    header = r.json()
    count = r.u64()
    flat = r.f64(count)
    r.done()
    try:
        spec = SurrogateSpec.from_dict(header["spec"]).validate()
        pos = 0
        groups = {}
        for gname, entries in header["groups"]:
            arrs = {}
            for name, shape in entries:
                size = int(np.prod(shape, dtype=np.int64))
                if pos + size > flat.size:
                    raise binio.FormatError("parameter blob shorter than header claims")
                arrs[name] = flat[pos:pos + size].reshape(shape).copy()
                pos += size
            groups[gname] = arrs
        if pos != flat.size:
            raise binio.FormatError("parameter blob longer than header claims")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, binio.FormatError):
            raise
        raise binio.FormatError(f"malformed checkpoint header: {exc}") from exc
    expected = build(spec)
    params = groups.pop("params")
    if list(params) != list(expected.params) or any(
            params[k].shape != expected.params[k].shape for k in params):
        raise binio.FormatError("checkpoint parameters do not match the recorded spec")
    model = SurrogateModel(spec, params)
    model.extra = groups
    model.meta = header.get("meta", {})
    return model


def save_checkpoint(model: SurrogateModel, path):
    data = checkpoint_bytes(model)
    binio.write_file(path, data)
    return binio.sha256_bytes(data)


def load_checkpoint(path) -> SurrogateModel:
    return checkpoint_from_bytes(Path(path).read_bytes())
