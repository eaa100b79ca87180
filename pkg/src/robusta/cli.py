"""``robusta`` command line: gen, corrupt, extract, train, fit-gmm, calibrate, eval, sweep, report.

Every subcommand accepts ``--seed`` and ``--config``. A config file holds flat
``key = value`` lines with ``#`` comments; keys name a subcommand option
(dashes or underscores) or a field of the generator, extractor, trainer or
gate settings. Command-line flags win over the file.
"""

import argparse
import dataclasses
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from .core import Modality, RobustaError, read_features, write_features
from .corruptions import DEFAULT_SEVERITY, corrupt_scene, corruption_order, select_corrupted_subset
from .detector import TrainConfig, save_model, load_model, train_concat, train_shared
from .evalbench import (
    ALL_KINDS,
    KindSpec,
    SweepConfig,
    average_precision,
    thread_count,
    video_seed,
)
from .extractors import ExtractorConfig, extract_bag
from .fusion import ModalityGate, Scheme, score_video_trace, write_traces
from .gmm import calibrate_sigmoid, fit_gmm, load_gmm, nll, save_gmm
from .pipeline import GateConfig, build_benchmark, stack_modality, sweep_benchmark
from .seeding import config_hash
from .synthgen import GenConfig, generate_dataset, read_scenes, write_scenes

log = logging.getLogger("robusta")

SETTINGS = {"gen": GenConfig, "extract": ExtractorConfig, "train": TrainConfig, "gate": GateConfig}


class CliError(RobustaError):
    pass


# --- config handling -------------------------------------------------------


def read_config(path):
    """Parse a flat ``key = value`` file into a dict of strings."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise CliError(f"{path}:{n}: empty key")
        values[key.replace("-", "_")] = value
    return values


def _coerce(text, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise CliError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if like and isinstance(like[0], tuple):
            raise CliError("nested tuples cannot be set from a config file")
        if like and isinstance(like[0], (int, float)) and not isinstance(like[0], bool):
            return tuple(type(like[0])(t) for t in items)
        return tuple(items)
    return text


def build_settings(cls, config, overrides=None):
    """Instantiate settings dataclass ``cls`` from config keys matching its fields."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else None
        if f.name in config:
            try:
                kwargs[f.name] = _coerce(config[f.name], default)
            except ValueError:
                raise CliError(f"bad value for {f.name}: {config[f.name]!r}") from None
    for key, value in (overrides or {}).items():
        if value is not None:
            kwargs[key] = value
    return cls(**kwargs)


def _known_keys(parser):
    keys = set()
    for sub in _subparsers(parser).values():
        keys.update(a.dest for a in sub._actions)
    for cls in SETTINGS.values():
        keys.update(f.name for f in dataclasses.fields(cls))
    keys.update(f.name for f in dataclasses.fields(SweepConfig))
    return keys


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


# --- artifact metadata -----------------------------------------------------


def run_hash(args, config, extra=None):
    items = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    items.update({f"config.{k}": v for k, v in config.items()})
    items.update(extra or {})
    return config_hash({k: str(v) for k, v in items.items()})


def write_meta(path, args, cfg_hash, **fields):
    """Sidecar ``<path>.meta.json`` recording seed, config hash and provenance."""
    meta = {"command": args.command, "seed": args.seed, "config_hash": f"{cfg_hash:016x}"}
    meta.update(fields)
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {path}")
    return p


def _parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


# --- subcommands -----------------------------------------------------------


def cmd_gen(args, config):
    overrides = {"seed": args.seed, "n_train": args.n_train, "n_test": args.n_test,
                 "segments_per_video": args.segments, "anomaly_ratio": args.anomaly_ratio}
    if args.n is not None:
        n_test = int(np.floor(args.n * 0.2 + 0.5))
        overrides.update(n_train=args.n - n_test, n_test=n_test)
    cfg = build_settings(GenConfig, config, overrides)
    cfg.validate()
    train, test = generate_dataset(cfg, workers=thread_count())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg.as_dict())
    write_scenes(train, out / "train.ras", cfg.seed, h)
    write_scenes(test, out / "test.ras", cfg.seed, h)
    print(f"wrote {len(train)} train and {len(test)} test scenes to {out}")


def cmd_corrupt(args, config):
    scenes, _, _ = read_scenes(_require(args.scenes, "scene file"))
    spec = KindSpec.parse(args.kind)
    if spec.missing is not None:
        raise CliError("missing-modality kinds drop features and cannot be written as raw scenes")
    ids = [s.id for s in scenes]
    chosen = select_corrupted_subset(ids, args.fraction, args.seed)
    position = {vid: i for i, vid in enumerate(corruption_order(ids, args.seed))}
    out = []
    for scene in scenes:
        if scene.id in chosen:
            kinds = (spec.kinds[position[scene.id] % len(spec.kinds)],) if spec.mixed else spec.kinds
            for kind in kinds:
                scene = corrupt_scene(scene, kind, args.severity, video_seed(args.seed, scene.id))
        out.append(scene)
    h = run_hash(args, config)
    _parent(args.out)
    write_scenes(out, args.out, args.seed, h)
    manifest = {
        "kind": spec.name, "severity": args.severity, "fraction": args.fraction, "seed": args.seed,
        "config_hash": f"{h:016x}", "corrupted": [vid for vid in ids if vid in chosen],
    }
    Path(str(args.out) + ".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"corrupted {len(chosen)} of {len(ids)} scenes with {spec.name} (severity {args.severity})")


def cmd_extract(args, config):
    scenes, scene_seed, _ = read_scenes(_require(args.scenes, "scene file"))
    cfg = build_settings(ExtractorConfig, config)
    cfg.validate()
    bags = [extract_bag(s, cfg, with_truth=not args.no_truth) for s in scenes]
    _parent(args.out)
    write_features(bags, args.out)
    h = run_hash(args, config)
    write_meta(args.out, args, h, scene_seed=scene_seed, videos=len(bags))
    print(f"wrote features for {len(bags)} videos to {args.out}")


def cmd_train(args, config):
    bags = read_features(_require(args.features, "feature file"))
    cfg = build_settings(TrainConfig, config, {"seed": args.seed, "epochs": args.epochs, "lr": args.lr})
    if args.mode == "concat":
        model = train_concat(bags, cfg)
    else:
        model = train_shared(bags, cfg, "linear" if args.mode == "shared" else "pad")
    _parent(args.out)
    save_model(model, args.out, args.seed, run_hash(args, config))
    print(f"trained {args.mode} detector: loss {model.history[0]:.4f} -> {model.history[-1]:.4f}")


def cmd_fit_gmm(args, config):
    bags = read_features(_require(args.features, "feature file"))
    modality = Modality(args.modality)
    gate = build_settings(GateConfig, config, {"k": args.k})
    feats = stack_modality(bags, modality)
    gmm = fit_gmm(feats, gate.k, args.seed, gate.max_iter, gate.tol, modality=modality)
    _parent(args.out)
    save_gmm(gmm, args.out, None, args.seed, run_hash(args, config))
    print(f"fitted {gate.k}-component {modality.value} mixture, avg log-likelihood {gmm.history[-1]:.4f}")


def cmd_calibrate(args, config):
    gmm, _, _, _ = load_gmm(_require(args.gmm, "mixture file"))
    bags = read_features(_require(args.features, "feature file"))
    gate = build_settings(GateConfig, config, {"target_clean_weight": args.target, "quantile": args.quantile})
    cal = calibrate_sigmoid(nll(stack_modality(bags, gmm.modality), gmm), gate.target_clean_weight, gate.quantile)
    out = args.out or args.gmm
    _parent(out)
    save_gmm(gmm, out, cal, args.seed, run_hash(args, config))
    print(f"calibrated {gmm.modality.value} gate: c={cal.scale:.6g} x_0={cal.shift:.6g}")


def _load_gates(paths):
    gates = {}
    for path in paths:
        gmm, cal, _, _ = load_gmm(_require(path, "mixture file"))
        if cal is None:
            raise CliError(f"{path} has no calibration; run 'calibrate' first")
        gates[gmm.modality] = ModalityGate(gmm, cal)
    return gates


def cmd_eval(args, config):
    bags = read_features(_require(args.features, "feature file"))
    model, _, _ = load_model(_require(args.model, "model file"))
    scheme = Scheme(args.scheme)
    gates = _load_gates([p for p in (args.gmm_audio, args.gmm_visual) if p])
    if scheme is Scheme.DYNAMIC and set(gates) != {Modality.AUDIO, Modality.VISUAL}:
        raise CliError("dynamic scheme needs --gmm-audio and --gmm-visual")
    traces = {b.id: score_video_trace(b, model, scheme, gates) for b in bags}
    if any(b.segment_truth is None for b in bags):
        raise CliError("evaluation needs features extracted with segment truth")
    ap = average_precision(
        np.concatenate([traces[b.id].fused for b in bags]), np.concatenate([b.segment_truth for b in bags])
    )
    if args.trace:
        _parent(args.trace)
        write_traces(traces, args.trace)
        write_meta(args.trace, args, run_hash(args, config), ap=round(ap, 6))
    print(f"AP {ap:.6f} ({scheme.value}, {model.mode.value} detector, {len(bags)} videos)")


def sweep_config(args, config):
    overrides = {"seed": args.seed}
    if args.kinds:
        overrides["kinds"] = tuple(k.strip() for k in args.kinds.split(","))
    if args.levels:
        overrides["levels"] = tuple(float(x) for x in args.levels.split(","))
    if args.severity is not None:
        overrides["severity"] = args.severity
    return build_settings(SweepConfig, config, overrides)


def cmd_sweep(args, config):
    sweep = sweep_config(args, config)
    sweep.validate()
    gen = build_settings(GenConfig, config, {"seed": args.seed})
    ext = build_settings(ExtractorConfig, config)
    train = build_settings(TrainConfig, config, {"seed": args.seed})
    gate = build_settings(GateConfig, config)
    variants = tuple(sorted({v for _, v in sweep.methods()}))
    bench = build_benchmark(args.seed, gen, ext, train, gate, variants=variants)
    report = sweep_benchmark(bench, sweep)
    _parent(args.out)
    report.to_csv(args.out)
    extra = {f"{name}.{k}": v for name, cfg in
             (("gen", gen), ("extract", ext), ("train", train), ("gate", gate), ("sweep", sweep))
             for k, v in dataclasses.asdict(cfg).items()}
    write_meta(args.out, args, config_hash({k: str(v) for k, v in extra.items()}), rows=len(report.rows))
    print(f"wrote {len(report.rows)} rows to {args.out}")


def format_table(header, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines)


def cmd_report(args, config):
    import csv

    with open(_require(args.csv, "report"), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CliError(f"{args.csv} is empty")
    print(format_table(rows[0], rows[1:]))


# --- parser ----------------------------------------------------------------


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="global u64 seed (default 0)")
    p.add_argument("--config", default=None, help="flat key = value settings file")


def build_parser():
    parser = argparse.ArgumentParser(prog="robusta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("gen", help="generate synthetic train/test scenes (RAS1)")
    p.add_argument("--n", type=int, help="total videos, split 80/20 into train and test")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--segments", type=int, help="segments per video")
    p.add_argument("--anomaly-ratio", type=float)
    p.add_argument("--out-dir", default="data")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("corrupt", help="corrupt a seeded subset of scenes (RAS1 in, RAS1 out)")
    p.add_argument("--scenes", required=True)
    p.add_argument("--kind", required=True, help=f"one of {', '.join(ALL_KINDS)}, a visual+audio pair or mixed_*")
    p.add_argument("--severity", type=int, default=DEFAULT_SEVERITY)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("extract", help="featurize scenes (RAS1 in, RAF1 out)")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-truth", action="store_true", help="drop segment truth (training features)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a detector (RAF1 in, RAM1 out)")
    p.add_argument("--features", required=True)
    p.add_argument("--mode", choices=("shared", "concat", "padding"), default="shared")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-gmm", help="fit a clean-feature mixture for one modality (RAG1 out)")
    p.add_argument("--features", required=True)
    p.add_argument("--modality", choices=("audio", "visual"), required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_gmm)

    p = sub.add_parser("calibrate", help="attach weight-curve calibration to a mixture")
    p.add_argument("--gmm", required=True)
    p.add_argument("--features", required=True, help="clean features the calibration is taken from")
    p.add_argument("--target", type=float, help="weight at the clean quantile (default 0.45)")
    p.add_argument("--quantile", type=float)
    p.add_argument("--out", help="output path (default: overwrite --gmm)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="score features with a fusion scheme and print AP")
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--scheme", choices=[s.value for s in Scheme], default="dynamic")
    p.add_argument("--gmm-audio")
    p.add_argument("--gmm-visual")
    p.add_argument("--trace", help="write per-segment scores and weights to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run generate -> train -> corruption sweep, write a report CSV")
    p.add_argument("--kinds", help="comma-separated kinds (default: all 16)")
    p.add_argument("--levels", help="comma-separated fractions")
    p.add_argument("--severity", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="print a CSV as an aligned table")
    p.add_argument("csv")
    p.set_defaults(func=cmd_report)

    for p in _subparsers(parser).values():
        _common(p)
    return parser


def _apply_config(parser, args, argv):
    """Re-parse with config-file values as defaults so flags still win."""
    if not args.config:
        return args, {}
    config = read_config(_require(args.config, "config file"))
    unknown = sorted(set(config) - _known_keys(parser))
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    sub = _subparsers(parser)[args.command]
    defaults = {}
    for action in sub._actions:
        if action.dest in config and action.dest not in ("help", "config"):
            text = config[action.dest]
            if action.type is not None:
                try:
                    defaults[action.dest] = action.type(text)
                except ValueError:
                    raise CliError(f"bad value for {action.dest}: {text!r}") from None
            elif action.const is True:
                defaults[action.dest] = _coerce(text, True)
            else:
                defaults[action.dest] = text
            if action.required:
                action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv), config


def _error_module(exc):
    name = "cli"
    tb = exc.__traceback__
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("robusta.") and mod != "robusta.cli":
            name = mod.split(".", 1)[1]
        tb = tb.tb_next
    return name


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args, config = _apply_config(parser, args, argv)
        if args.seed is None:
            args.seed = int(config.get("seed", 0))
        if args.seed < 0 or args.seed >= 2**64:
            raise CliError(f"seed must be an unsigned 64-bit integer, got {args.seed}")
        args.func(args, config)
    except (RobustaError, ValueError, OSError) as exc:
        log.debug("%s", traceback.format_exc())
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"ERROR {_error_module(exc)}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
