"""Command-line pipeline: gen, pretrain, stats, adapt, eval, bench.

Every command reads an optional JSON config (``--config``); explicit flags
override it. Each run appends one line to ``manifest.jsonl`` in its output
directory listing the resolved config and the sha256 of every input and
output file.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__, binio
from .adapt import AdaptationConfig, batch_stream, run_adaptation
from .numkit import NumericError
from .surrogate import TrainingError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SPLIT_FILES = {"source-train": "source-train.sttd", "source-val": "source-val.sttd",
               "target-test": "target-test.sttd"}

# resolved defaults per command; flags and config keys use the same names
DEFAULTS = {
    "gen": {"task": "bump", "grid_size": 128, "seed": 0, "source_range": None, "target_range": None,
            "n_train": 1024, "n_val": 256, "n_test": 640, "noise": 0.01, "target_labels": True},
    "pretrain": {"data": None, "epochs": 300, "lr": 1e-3, "seed": 0, "latent_dim": 8, "hidden": [64, 64],
                 "activation": "gelu", "batch_size": 32, "patience": 100, "resume": None, "variance_head": False},
    "stats": {"checkpoint": None, "data": None, "m": 8, "tau": 0.95},
    "adapt": {"checkpoint": None, "artifact": None, "data": None, "method": "satts", "alpha_mode": "weighted",
              "lambda": None, "lr": None, "grid": None, "batch_size": 64, "seed": 0, "optimizer": "sgd"},
    "eval": {"checkpoint": None, "data": None},
    "bench": {"task": "bump", "grid_size": 128, "seed": 0, "epochs": 300, "lr": 1e-3, "seeds": 20,
              "methods": "source,ssa,satts,satts-no-iwv", "labels": False, "m": 8, "tau": 0.95,
              "grid": None, "batch_size": 64, "alpha_mode": "weighted", "lambda": None},
}


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


# --------------------------------------------------------------------- parsing


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="satts", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"satts {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; explicit flags override it")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen", help="generate source-train/source-val/target-test datasets")
    common(g)
    g.add_argument("--task", choices=["bump", "bump-field", "heat-1d"])
    g.add_argument("--grid-size", type=int)
    g.add_argument("--source-range", type=_floats)
    g.add_argument("--target-range", type=_floats)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--no-target-labels", dest="target_labels", action="store_const", const=False)

    t = sub.add_parser("pretrain", help="train the surrogate on the source split")
    common(t)
    t.add_argument("--data", help="dataset directory written by gen")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--hidden", type=_ints)
    t.add_argument("--activation", choices=["gelu", "tanh", "silu"])
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--resume", help="checkpoint to continue training from")
    t.add_argument("--variance-head", action="store_const", const=True)

    s = sub.add_parser("stats", help="build the source statistics artifact")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--m", type=int)
    s.add_argument("--tau", type=float)

    a = sub.add_parser("adapt", help="test-time adaptation with optional learning-rate selection")
    common(a)
    a.add_argument("--checkpoint")
    a.add_argument("--artifact")
    a.add_argument("--data")
    a.add_argument("--method", choices=["none", "tent", "ssa", "satts"])
    a.add_argument("--alpha-mode", choices=["scaled", "weighted"])
    a.add_argument("--lambda", dest="lambda", type=float)
    a.add_argument("--lr", type=float)
    a.add_argument("--grid", help="comma-separated learning rates, or 'default'")
    a.add_argument("--batch-size", type=int)
    a.add_argument("--optimizer", choices=["sgd", "adam"])

    e = sub.add_parser("eval", help="metrics of a checkpoint on a labeled dataset")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="dataset file")

    b = sub.add_parser("bench", help="run the comparison protocol and write a report")
    common(b)
    b.add_argument("--task", choices=["bump", "bump-field", "heat-1d"])
    b.add_argument("--grid-size", type=int)
    b.add_argument("--epochs", type=int)
    b.add_argument("--lr", type=float)
    b.add_argument("--seeds", type=int)
    b.add_argument("--methods")
    b.add_argument("--labels", action="store_const", const=True,
                   help="allow target labels for the oracle selector")
    b.add_argument("--m", type=int)
    b.add_argument("--tau", type=float)
    b.add_argument("--grid")
    b.add_argument("--batch-size", type=int)
    b.add_argument("--alpha-mode", choices=["scaled", "weighted"])
    b.add_argument("--lambda", dest="lambda", type=float)
    return p


def resolve(args) -> dict:
    """Defaults, then the config file, then explicitly given flags."""
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config: {exc}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config is not valid JSON: {exc}", EXIT_VALIDATION) from exc
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise CliError(f"unknown config keys for {args.command}: {unknown}", EXIT_VALIDATION)
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


# -------------------------------------------------------------------- manifest


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def write_manifest(out: Path, command: str, config_path, resolved: dict, inputs, outputs, started: str):
    entry = {
        "command": command, "config_file": config_path, "config": resolved, "tool_version": __version__,
        "inputs": {str(p): binio.sha256_file(p) for p in inputs},
        "outputs": {str(p): binio.sha256_file(p) for p in outputs},
        "started": started, "finished": _now(),
    }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise CliError(f"--{k.replace('_', '-')} is required", EXIT_VALIDATION)


def _data_file(path, split):
    p = Path(path)
    return p / SPLIT_FILES[split] if p.is_dir() else p


# -------------------------------------------------------------------- commands


def cmd_gen(cfg, out: Path):
    from .tasks import TaskConfig, gen_task, save_dataset

    kw = {"kind": cfg["task"], "grid_size": cfg["grid_size"], "seed": cfg["seed"], "n_train": cfg["n_train"],
          "n_val": cfg["n_val"], "n_test": cfg["n_test"], "noise": cfg["noise"]}
    task = TaskConfig(**kw)
    if task.kind == "heat-1d" and cfg["source_range"] is None:
        task = replace(task, source_range=(0.5, 1.5), target_range=(2.0, 3.0))
    if cfg["source_range"] is not None:
        task = replace(task, source_range=tuple(cfg["source_range"]))
    if cfg["target_range"] is not None:
        task = replace(task, target_range=tuple(cfg["target_range"]))
    for name in ("source_range", "target_range"):
        if len(getattr(task, name)) != 2:
            raise CliError(f"--{name.replace('_', '-')} needs two values lo,hi", EXIT_VALIDATION)
    splits = gen_task(task)  # validates before anything is written
    if not cfg["target_labels"]:
        splits["target-test"] = splits["target-test"].without_labels()
    outputs = []
    for split, ds in splits.items():
        path = out / SPLIT_FILES[split]
        save_dataset(ds, path)
        outputs.append(path)
    return [], outputs


def cmd_pretrain(cfg, out: Path):
    from .surrogate import SurrogateSpec, TrainConfig, build, load_checkpoint, pretrain, save_checkpoint
    from .tasks import load_dataset

    _require(cfg, "data")
    tr_path, va_path = _data_file(cfg["data"], "source-train"), _data_file(cfg["data"], "source-val")
    train, val = load_dataset(tr_path), load_dataset(va_path)
    inputs = [tr_path, va_path]
    tcfg = TrainConfig(lr=cfg["lr"], epochs=cfg["epochs"], seed=cfg["seed"], batch_size=cfg["batch_size"],
                       patience=min(cfg["patience"], cfg["epochs"]),
                       loss="nll" if cfg["variance_head"] else "mse")
    if cfg["resume"]:
        model = load_checkpoint(cfg["resume"])
        inputs.append(Path(cfg["resume"]))
    else:
        spec = SurrogateSpec(train.inputs.shape[1], cfg["latent_dim"], train.task.grid_size,
                             hidden=tuple(cfg["hidden"]), activation=cfg["activation"],
                             variance_head=bool(cfg["variance_head"]), seed=cfg["seed"])
        model = build(spec.validate())
    model, history = pretrain(model, train.batch(), val.batch(), tcfg, resume=bool(cfg["resume"]))
    ckpt = out / "checkpoint.sttc"
    save_checkpoint(model, ckpt)
    hist = out / "history.tsv"
    rows = ["epoch\ttrain_loss\tval_loss\tlr"]
    rows += [f"{h['epoch']}\t{h['train_loss']:.17g}\t{h['val_loss']:.17g}\t{h['lr']:.17g}" for h in history]
    binio.write_file(hist, ("\n".join(rows) + "\n").encode())
    return inputs, [ckpt, hist]


def cmd_stats(cfg, out: Path):
    from .srcstats import build_artifact, save_artifact
    from .surrogate import load_checkpoint
    from .tasks import load_dataset

    _require(cfg, "checkpoint", "data")
    if cfg["m"] < 1:
        raise CliError("--m must be >= 1", EXIT_VALIDATION)
    va_path = _data_file(cfg["data"], "source-val")
    model = load_checkpoint(cfg["checkpoint"])
    val = load_dataset(va_path)
    if not val.labeled:
        raise CliError("the source validation set must be labeled", EXIT_VALIDATION)
    art = build_artifact(model, val.batch(), cfg["tau"], cfg["m"], binio.sha256_file(cfg["checkpoint"]))
    path = out / "artifact.stts"
    save_artifact(art, path)
    return [Path(cfg["checkpoint"]), va_path], [path]


def cmd_adapt(cfg, out: Path):
    from .select import DEFAULT_GRID, lr_line_search
    from .srcstats import load_artifact
    from .surrogate import load_checkpoint, save_checkpoint
    from .tasks import load_dataset

    _require(cfg, "checkpoint", "data")
    method = cfg["method"]
    tg_path = _data_file(cfg["data"], "target-test")
    model = load_checkpoint(cfg["checkpoint"])
    target = load_dataset(tg_path)
    inputs = [Path(cfg["checkpoint"]), tg_path]
    art = None
    if method in ("satts", "ssa"):
        _require(cfg, "artifact")
        art = load_artifact(cfg["artifact"], binio.sha256_file(cfg["checkpoint"]))
        inputs.append(Path(cfg["artifact"]))
    acfg = AdaptationConfig(method=method, lam=cfg["lambda"], batch_size=cfg["batch_size"],
                            alpha_mode=cfg["alpha_mode"], optimizer=cfg["optimizer"], seed=cfg["seed"])
    stream = batch_stream(target.batch().inputs, acfg.batch_size, seed=cfg["seed"])
    outputs = []
    if method == "satts" and cfg["lr"] is None:
        grid = DEFAULT_GRID if cfg["grid"] in (None, "default") else tuple(_floats(cfg["grid"]))
        result = lr_line_search(model, stream, art, acfg.validate(), grid)
        adapted = result.model
        report = out / "selection.txt"
        binio.write_file(report, result.selection.to_text(grid).encode())
        outputs.append(report)
        trace_rows = ["lr\tstep\tiwv"] + [f"{c.lr:g}\t{c.step}\t{c.iwv:.17g}" for c in result.candidates]
        trace_text = "\n".join(trace_rows) + "\n"
    else:
        lr = 0.01 if cfg["lr"] is None else cfg["lr"]
        trace, adapted = run_adaptation(model, stream, art.stats if art else None, art.subset if art else None,
                                        replace(acfg, lr=lr))
        trace_text = f"lr\t{lr:g}\n" + trace.to_text()
        snaps = out / "snapshots.bin"
        binio.write_file(snaps, trace.snapshot_bytes())
        outputs.append(snaps)
    tr = out / "trace.tsv"
    binio.write_file(tr, trace_text.encode())
    ckpt = out / "adapted.sttc"
    if method == "none":
        binio.write_file(ckpt, Path(cfg["checkpoint"]).read_bytes())
    else:
        save_checkpoint(adapted, ckpt)
    return inputs, [ckpt, tr, *outputs]


def cmd_eval(cfg, out: Path):
    from .bench import model_metrics
    from .surrogate import load_checkpoint
    from .tasks import load_dataset

    _require(cfg, "checkpoint", "data")
    model = load_checkpoint(cfg["checkpoint"])
    ds = load_dataset(cfg["data"])
    if not ds.labeled:
        raise CliError(f"{cfg['data']} carries no labels; evaluation needs targets", EXIT_VALIDATION)
    m = model_metrics(model, ds.batch())
    path = out / "metrics.json"
    binio.write_file(path, (json.dumps({"rmse": m.rmse, "mae": m.mae, "r2": m.r2, "domain": ds.domain},
                                       sort_keys=True, indent=2) + "\n").encode())
    return [Path(cfg["checkpoint"]), Path(cfg["data"])], [path]


def cmd_bench(cfg, out: Path):
    from .bench import ExperimentConfig, emit_report, run_experiment
    from .select import DEFAULT_GRID
    from .surrogate import TrainConfig
    from .tasks import TaskConfig

    methods = tuple(m.strip() for m in str(cfg["methods"]).split(",") if m.strip())
    if "oracle" in methods and not cfg["labels"]:
        raise CliError("the oracle selector uses target labels; pass --labels to allow it", EXIT_VALIDATION)
    task = TaskConfig(kind=cfg["task"], grid_size=cfg["grid_size"], seed=cfg["seed"])
    if task.kind == "heat-1d":
        task = replace(task, source_range=(0.5, 1.5), target_range=(2.0, 3.0))
    grid = DEFAULT_GRID if cfg["grid"] in (None, "default") else tuple(_floats(cfg["grid"]))
    exp = ExperimentConfig(
        task=task, train=TrainConfig(lr=cfg["lr"], epochs=cfg["epochs"], patience=min(100, cfg["epochs"]),
                                     seed=cfg["seed"]),
        adapt=AdaptationConfig(batch_size=cfg["batch_size"], alpha_mode=cfg["alpha_mode"], lam=cfg["lambda"]),
        methods=methods, seeds=cfg["seeds"], model_seed=cfg["seed"], tau=cfg["tau"], m=cfg["m"], grid=grid,
        labels=bool(cfg["labels"]))
    report = run_experiment(exp)
    paths = emit_report(report, out)
    return [], [paths["report"], paths["table"], paths["plot"]]


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "stats": cmd_stats, "adapt": cmd_adapt,
            "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = _now()
    try:
        cfg = resolve(args)
        out = Path(args.out)
        inputs, outputs = COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, args.config, cfg, inputs, outputs, started)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except binio.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, TrainingError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
