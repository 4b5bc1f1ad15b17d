"""Command-line driver: train, eval, gradcheck, dtwcheck, synth, bench.

Configuration is a flat set of namespaced keys (``model.conv1.width``,
``train.lr0``, ...). Values come from the built-in defaults, then a preset,
then a ``key = value`` config file, then ``--key value`` flags, in that order.

Exit codes: 0 success or oracle pass, 1 validation error, 2 runtime failure,
3 oracle failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .align import InfeasibleAlignmentError
from .core import DimensionError, DomainError
from .data import (DataFormatError, SplitSpec, SynthSpec, load_arabic, load_delimited_dir,
                   prepare, split, synth_warped, write_delimited_dir)
from .nn import ModelConfig, init_model, model_forward
from .train import (CheckpointError, DivergedError, TrainConfig, evaluate, load_checkpoint,
                    save_checkpoint, train_loop)
from .verify import dtw_oracle_check, finite_diff_check

log = logging.getLogger("dwacnn")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ORACLE = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "dataset.kind": "synth",  # synth | arabic | delimited
    "dataset.path": "",  # delimited root, or the training file for arabic
    "dataset.test_path": "",  # arabic test file
    "dataset.train_manifest": "",  # arabic: blocks per class, comma separated
    "dataset.test_manifest": "",
    "dataset.length": 50,  # every series is resampled to this length
    "dataset.test_fraction": 0.1,
    "dataset.validation_count": 50,
    "synth.classes": 4,
    "synth.per_class": 250,
    "synth.length": 50,
    "synth.dim": 2,
    "synth.warp": 2.0,
    "synth.noise": 0.05,
    "synth.bumps": 4,
    "synth.shared": 0,
    "model.filters": 50,
    "model.conv1.width": 8,
    "model.conv1.stride": 2,
    "model.conv2.width": 8,
    "model.conv2.stride": 2,
    "model.fc1": 400,
    "model.fc2": 100,
    "model.conv_mode": "dwa",
    "model.dim": 0,  # only read by bench; training takes D and K from the data
    "model.classes": 0,
    "train.lr0": 0.001,
    "train.alpha": 0.001,
    "train.lr_fc": 0.0001,
    "train.batch_size": 100,
    "train.iterations": 60000,
    "train.eval_every": 1000,
    "train.loss_reduction": "mean",
    "output.dir": "runs/default",
    "eval.checkpoint": "",
    "gradcheck.seeds": 1,
    "gradcheck.h": 1e-5,
    "gradcheck.threshold": 1e-4,
    "gradcheck.freeze_alignment": True,
    "gradcheck.batch": 4,
    "gradcheck.length": 16,
    "gradcheck.dim": 2,
    "gradcheck.classes": 3,
    "gradcheck.filters": 4,
    "gradcheck.width": 4,
    "gradcheck.stride": 2,
    "gradcheck.fc1": 16,
    "gradcheck.fc2": 8,
    "gradcheck.corrupt": "",  # testing hook: parameter whose analytic gradient is scaled by 1.01
    "dtwcheck.max_len": 8,
    "dtwcheck.trials": 1000,
    "bench.presets": "",  # comma separated; empty benches the current geometry
    "bench.repeats": 50,
    "bench.warmup": 5,
}

_GEOMETRY = ("dataset.length", "model.conv1.width", "model.conv1.stride", "model.conv2.width",
             "model.conv2.stride", "model.dim", "model.classes", "train.batch_size")

PRESETS = {
    "unipen": {"dataset.kind": "delimited", "dataset.length": 50, "model.conv1.width": 8,
               "model.conv1.stride": 2, "model.conv2.width": 8, "model.conv2.stride": 2,
               "model.dim": 2, "model.classes": 10, "train.batch_size": 100},
    "arabic": {"dataset.kind": "arabic", "dataset.length": 40, "model.conv1.width": 6,
               "model.conv1.stride": 2, "model.conv2.width": 6, "model.conv2.stride": 2,
               "model.dim": 13, "model.classes": 10, "train.batch_size": 50,
               "dataset.train_manifest": ",".join(["660"] * 10),
               "dataset.test_manifest": ",".join(["220"] * 10)},
    # length 50 does not chain for width 12 stride 4 at both layers; 100 does
    "adl": {"dataset.kind": "delimited", "dataset.length": 100, "model.conv1.width": 12,
            "model.conv1.stride": 4, "model.conv2.width": 12, "model.conv2.stride": 4,
            "model.dim": 3, "model.classes": 7, "train.batch_size": 5},
    "synth": {"dataset.kind": "synth", "dataset.length": 50, "model.conv1.width": 8,
              "model.conv1.stride": 2, "model.conv2.width": 8, "model.conv2.stride": 2,
              "model.dim": 2, "model.classes": 4, "train.batch_size": 20,
              "train.iterations": 5000, "train.eval_every": 500,
              "dataset.test_fraction": 0.2, "dataset.validation_count": 0},
}


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------------

def _coerce(key, raw):
    default = DEFAULTS[key]
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_config_text(text: str, source="<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _parse_overrides(tokens) -> dict:
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"--{key} needs a value")
            value = tokens[i + 1]
            i += 2
        if key not in DEFAULTS:
            raise ConfigError(f"unknown option --{key}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(preset=None, config_path=None, overrides=None) -> dict:
    cfg = dict(DEFAULTS)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg.update(PRESETS[preset])
    if config_path:
        p = Path(config_path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        cfg.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    cfg.update(overrides or {})
    return cfg


def render_config(cfg: dict) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in sorted(cfg.items()))


def model_config(cfg: dict, dim: int, classes: int) -> ModelConfig:
    try:
        return ModelConfig(
            cfg["dataset.length"], dim, classes, filters=cfg["model.filters"],
            conv1_width=cfg["model.conv1.width"], conv1_stride=cfg["model.conv1.stride"],
            conv2_width=cfg["model.conv2.width"], conv2_stride=cfg["model.conv2.stride"],
            fc1=cfg["model.fc1"], fc2=cfg["model.fc2"], conv_mode=cfg["model.conv_mode"])
    except (ValueError, DimensionError) as exc:
        raise ConfigError(f"model geometry: {exc}") from None


def train_config(cfg: dict, model: ModelConfig) -> TrainConfig:
    try:
        return TrainConfig(model, lr0=cfg["train.lr0"], alpha=cfg["train.alpha"], lr_fc=cfg["train.lr_fc"],
                           batch_size=cfg["train.batch_size"], iterations=cfg["train.iterations"],
                           seed=cfg["seed"], eval_every=cfg["train.eval_every"],
                           loss_reduction=cfg["train.loss_reduction"])
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def _manifest(cfg, key):
    text = cfg[key]
    try:
        counts = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None
    if not counts or min(counts) < 1:
        raise ConfigError(f"{key}: needs at least one positive count")
    return counts


def _existing(cfg, key, want_dir=False):
    if not cfg[key]:
        raise ConfigError(f"{key} is required for dataset.kind={cfg['dataset.kind']}")
    p = Path(cfg[key])
    if not (p.is_dir() if want_dir else p.is_file()):
        raise ConfigError(f"{key}: {p} does not exist")
    return p


def synth_spec(cfg: dict) -> SynthSpec:
    try:
        return SynthSpec(classes=cfg["synth.classes"], per_class=cfg["synth.per_class"],
                         length=cfg["synth.length"], dim=cfg["synth.dim"], warp=cfg["synth.warp"],
                         noise=cfg["synth.noise"], seed=cfg["seed"], bumps=cfg["synth.bumps"],
                         shared=cfg["synth.shared"])
    except ValueError as exc:
        raise ConfigError(f"synth: {exc}") from None


def load_data(cfg: dict):
    """Raw (train, validation, test) datasets, before resampling."""
    kind = cfg["dataset.kind"]
    try:
        spec = SplitSpec(cfg["dataset.test_fraction"], cfg["dataset.validation_count"], cfg["seed"])
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from None
    if kind == "synth":
        return split(synth_warped(synth_spec(cfg)), spec)
    if kind == "delimited":
        return split(load_delimited_dir(_existing(cfg, "dataset.path", want_dir=True)), spec)
    if kind == "arabic":
        train, test = load_arabic(_existing(cfg, "dataset.path"), _existing(cfg, "dataset.test_path"),
                                  _manifest(cfg, "dataset.train_manifest"),
                                  _manifest(cfg, "dataset.test_manifest"))
        if spec.validation_count:
            # carve validation out of the fixed training division only
            holdout = SplitSpec(spec.validation_count / len(train), 0, spec.seed)
            train, _, val = split(train, holdout)
        else:
            val = None
        return train, val, test
    raise ConfigError(f"dataset.kind must be synth, arabic or delimited, got {kind!r}")


def prepared_data(cfg: dict):
    train, val, test = load_data(cfg)
    if len(test) == 0:
        raise ConfigError("test split is empty")
    try:
        train, (val, test), _ = prepare(train, [val, test], cfg["dataset.length"])
    except ValueError as exc:
        raise ConfigError(f"dataset.length: {exc}") from None
    return train, (val if val is not None and len(val) else None), test


# -- commands ---------------------------------------------------------------------

def cmd_train(cfg: dict, serial=False) -> int:
    # the conv chain depends only on the length, so check it before any data work
    model_config(cfg, 1, 2)
    train, val, test = prepared_data(cfg)
    mcfg = model_config(cfg, train.feature_dim, train.num_classes)
    tcfg = train_config(cfg, mcfg)
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(render_config(cfg), encoding="utf-8")
    model, metrics, rng = train_loop(tcfg, train, val, test, metrics_path=out / "metrics.tsv",
                                     timing=not serial)
    save_checkpoint(model, out / "model.ckpt", tcfg.iterations, rng.get_state())
    print(f"final test accuracy {metrics.rows[-1][3]:.6f} after {tcfg.iterations} iterations")
    print(f"wrote {out / 'metrics.tsv'} and {out / 'model.ckpt'}")
    return EXIT_OK


def format_confusion(conf: np.ndarray) -> str:
    K = conf.shape[0]
    width = max(5, len(str(conf.max())) + 1)
    lines = ["true\\pred" + "".join(f"{k:>{width}}" for k in range(K))]
    for k in range(K):
        lines.append(f"{k:>9}" + "".join(f"{v:>{width}}" for v in conf[k]))
    return "\n".join(lines)


def cmd_eval(cfg: dict) -> int:
    ckpt = _existing(cfg, "eval.checkpoint")
    try:
        model, _ = load_checkpoint(ckpt)
    except (CheckpointError, OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"eval.checkpoint: {exc}") from None
    _, _, test = prepared_data(cfg)
    acc, conf = evaluate(model, test)
    print(f"test accuracy {acc:.6f} ({int(np.trace(conf))}/{int(conf.sum())})")
    print(format_confusion(conf))
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    try:
        mcfg = ModelConfig(cfg["gradcheck.length"], cfg["gradcheck.dim"], cfg["gradcheck.classes"],
                           filters=cfg["gradcheck.filters"], conv1_width=cfg["gradcheck.width"],
                           conv1_stride=cfg["gradcheck.stride"], conv2_width=cfg["gradcheck.width"],
                           conv2_stride=cfg["gradcheck.stride"], fc1=cfg["gradcheck.fc1"],
                           fc2=cfg["gradcheck.fc2"], conv_mode=cfg["model.conv_mode"])
    except (ValueError, DimensionError) as exc:
        raise ConfigError(f"gradcheck geometry: {exc}") from None
    if cfg["gradcheck.batch"] < 1 or cfg["gradcheck.seeds"] < 1:
        raise ConfigError("gradcheck.batch and gradcheck.seeds must be >= 1")
    hook = None
    if cfg["gradcheck.corrupt"]:
        name = cfg["gradcheck.corrupt"]
        if name not in mcfg.param_shapes():
            raise ConfigError(f"gradcheck.corrupt: unknown parameter {name!r}")

        def hook(grads):
            grads = dict(grads)
            grads[name] = grads[name] * 1.01
            return grads

    ok = True
    for s in range(cfg["gradcheck.seeds"]):
        gen = np.random.default_rng([cfg["seed"], s])
        model = init_model(mcfg, gen)
        x = gen.normal(size=(cfg["gradcheck.batch"], mcfg.length, mcfg.dim))
        y = gen.integers(0, mcfg.classes, size=cfg["gradcheck.batch"])
        try:
            report = finite_diff_check(model, x, y, h=cfg["gradcheck.h"], threshold=cfg["gradcheck.threshold"],
                                       freeze_alignment=cfg["gradcheck.freeze_alignment"], grad_hook=hook)
        except ValueError as exc:
            raise ConfigError(f"gradcheck: {exc}") from None
        print(f"# seed {s}: {'pass' if report.passed else 'FAIL'} "
              f"(max rel error {report.max_rel_error:.3e}, threshold {report.threshold:g})")
        print(report.render())
        ok &= report.passed
    return EXIT_OK if ok else EXIT_ORACLE


def cmd_dtwcheck(cfg: dict) -> int:
    n, trials = cfg["dtwcheck.max_len"], cfg["dtwcheck.trials"]
    if not 1 <= n <= 12 or trials < 1:
        raise ConfigError("dtwcheck.max_len must lie in [1, 12] and dtwcheck.trials be >= 1")
    rows = dtw_oracle_check(n, trials, seed=cfg["seed"])
    print("I=J\ttrials\tcost_mismatch\tinvalid_path\tnot_argmin")
    for r in rows:
        print(f"{r.length}\t{r.trials}\t{r.cost_mismatches}\t{r.invalid_paths}\t{r.not_argmin}")
    ok = all(r.passed for r in rows)
    print("pass" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_ORACLE


def cmd_synth(cfg: dict) -> int:
    ds = synth_warped(synth_spec(cfg))
    out = Path(cfg["output.dir"])
    files = write_delimited_dir(ds, out)
    print(f"wrote {len(files)} series in {ds.num_classes} classes to {out}")
    return EXIT_OK


@dataclass
class BenchRow:
    name: str
    mode: str
    median: float
    p95: float


def bench_geometry(cfg: dict, name: str) -> list:
    """Single-sample inference latency for both conv modes at one geometry."""
    dim, classes = cfg["model.dim"], cfg["model.classes"]
    if dim < 1 or classes < 1:
        raise ConfigError("bench needs model.dim and model.classes (set by the presets)")
    rows = []
    gen = np.random.default_rng(cfg["seed"])
    batch = gen.normal(size=(8, cfg["dataset.length"], dim))
    sample = gen.normal(size=(1, cfg["dataset.length"], dim))
    for mode in ("linear", "dwa"):
        mcfg = model_config({**cfg, "model.conv_mode": mode}, dim, classes)
        model = init_model(mcfg, np.random.default_rng(cfg["seed"]))
        model_forward(model, batch)  # sets batch-norm running statistics
        for _ in range(cfg["bench.warmup"]):
            model_forward(model, sample, train=False)
        times = []
        for _ in range(cfg["bench.repeats"]):
            t0 = time.perf_counter()
            model_forward(model, sample, train=False)
            times.append(time.perf_counter() - t0)
        rows.append(BenchRow(name, mode, float(np.median(times)), float(np.percentile(times, 95))))
    return rows


def cmd_bench(cfg: dict) -> int:
    if cfg["bench.repeats"] < 1 or cfg["bench.warmup"] < 0:
        raise ConfigError("bench.repeats must be >= 1 and bench.warmup >= 0")
    names = [p.strip() for p in cfg["bench.presets"].split(",") if p.strip()]
    jobs = []
    for p in names:
        if p not in PRESETS:
            raise ConfigError(f"bench.presets: unknown preset {p!r}")
        jobs.append((p, {**cfg, **{k: v for k, v in PRESETS[p].items() if k in _GEOMETRY}}))
    if not jobs:
        jobs = [("config", cfg)]
    for _, c in jobs:
        model_config(c, max(c["model.dim"], 1), max(c["model.classes"], 1))
    print("geometry\tmode\tmedian_s\tp95_s")
    for name, c in jobs:
        lin, dwa = bench_geometry(c, name)
        for r in (lin, dwa):
            print(f"{r.name}\t{r.mode}\t{r.median:.6f}\t{r.p95:.6f}")
        print(f"{name}\tratio\t{dwa.median / lin.median:.3f}\t{dwa.p95 / lin.p95:.3f}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "dtwcheck": cmd_dtwcheck, "synth": cmd_synth, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dwacnn", description="CNNs with DTW-aligned convolution filters.",
        epilog="Any config key can be overridden with --<key> <value>, e.g. --train.iterations 200.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--preset", choices=sorted(PRESETS))
    ap.add_argument("--serial", action="store_true",
                    help="single-threaded, no wall-clock column: byte-identical reruns")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    ap = build_parser()
    args, rest = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.preset, args.config, _parse_overrides(rest))
        if args.serial:
            import numba
            numba.set_num_threads(1)
        if args.command == "train":
            return cmd_train(cfg, serial=args.serial)
        return COMMANDS[args.command](cfg)
    except (DivergedError, CheckpointError, FloatingPointError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, DataFormatError, DimensionError, DomainError, InfeasibleAlignmentError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
