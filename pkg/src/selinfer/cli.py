"""Command-line workflows: gen-data, train, build-index, calibrate, infer, eval, sweep.

Every command writes its outputs atomically (temporary file, then rename) and
a ``<output>.manifest.json`` recording inputs with their 64-bit digests.
Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import contextlib
import itertools
import json
import os
import shutil
import sys
import tempfile
import warnings
from dataclasses import asdict, fields
from datetime import datetime, timezone

from . import __version__
from .calib import ProfileDriftWarning, calibrate, load_profile, profile_to_json
from .data import read_truth, read_tsv
from .engine import Engine, EngineConfig, read_traces, write_traces
from .errors import ConfigError, DataError, DivergenceError, DriftError, ParameterError, SelinferError
from .hashing import file_digest
from .metrics import report
from .model import Backbone, TrainConfig, load_model, model_bytes, train
from .sketch import FrequencySketch, load_sketch, sketch_bytes
from .synth import SynthSpec, generate, write_synth

SECTIONS = ("engine", "synth", "train", "model", "sketch", "calibration")
MODEL_DEFAULTS = {"buckets": 1 << 17, "dim": 8, "mlp_widths": [64, 32], "use_fm": True, "seed": 0}
SKETCH_DEFAULTS = {"depth": 4, "width": 1 << 18, "eta": 1000, "seed": 0}
CALIB_DEFAULTS = {"sample_size": 100_000, "validation_size": 20_000, "created_at": None}
ALIASES = {"lambda": "lam", "k": "k_max"}


# configuration -------------------------------------------------------------


def load_config(path=None, overrides=()):
    """Read a JSON config (sections as in ``SECTIONS``) and apply ``section.key=value`` overrides."""
    doc = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = {s: dict(doc.get(s) or {}) for s in SECTIONS}
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        cfg[section][name] = _parse_value(raw)
    return cfg


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _build(cls, section, doc):
    names = {f.name for f in fields(cls)}
    doc = {ALIASES.get(k, k): v for k, v in doc.items()}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ParameterError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from None


def _merged(defaults, section, doc):
    unknown = set(doc) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return {**defaults, **doc}


def engine_config(cfg):
    return _build(EngineConfig, "engine", cfg["engine"])


# atomic outputs and manifests ------------------------------------------------


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temporary path beside ``path``; rename over it only on success."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_bytes(path, data):
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(data)


def write_text(path, text):
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _now():
    return datetime.now(timezone.utc).isoformat()


def write_manifest(path, command, config_path, inputs, outputs, seed, started_at):
    doc = {
        "command": command,
        "version": __version__,
        "config_path": config_path,
        "inputs": {p: file_digest(p) for p in inputs if p},
        "outputs": {p: file_digest(p) for p in outputs},
        "seed": seed,
        "started_at": started_at,
        "finished_at": _now(),
    }
    write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _manifest_for(output):
    return output + ".manifest.json"


def _require(path, what):
    if not path or not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


# commands --------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    started = _now()
    spec = _build(SynthSpec, "synth", cfg["synth"])
    data = generate(spec)
    out = args.out
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=".tmp-gen-", dir=parent)
    try:
        staged = write_synth(data, stage)
        write_text(os.path.join(stage, "synth.json"), json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
        os.makedirs(out, exist_ok=True)
        final = {}
        for key, p in list(staged.items()) + [("spec", os.path.join(stage, "synth.json"))]:
            dest = os.path.join(out, os.path.basename(p))
            os.replace(p, dest)
            final[key] = dest
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    write_manifest(os.path.join(out, "manifest.json"), "gen-data", args.config, [args.config],
                   sorted(final.values()), spec.seed, started)
    _say(args, f"wrote {len(data.ids)} instances to {out}")


def cmd_train(args, cfg):
    started = _now()
    corpus = read_tsv(_require(args.train, "training corpus"))
    mcfg = _merged(MODEL_DEFAULTS, "model", cfg["model"])
    buckets = mcfg["buckets"]
    if isinstance(buckets, int):
        buckets = [buckets] * corpus.num_fields
    widths = mcfg["mlp_widths"]
    model = Backbone(buckets, dim=mcfg["dim"], mlp_widths=None if widths is None else tuple(widths),
                     use_fm=bool(mcfg["use_fm"]), seed=mcfg["seed"])
    tcfg = _build(TrainConfig, "train", cfg["train"])
    train(model, corpus, tcfg)
    write_bytes(args.out, model_bytes(model))
    write_manifest(_manifest_for(args.out), "train", args.config, [args.config, args.train], [args.out],
                   tcfg.seed, started)
    _say(args, f"trained on {len(corpus)} instances; epoch losses {[round(x, 5) for x in model.loss_history]}")


def cmd_build_index(args, cfg):
    started = _now()
    corpus = read_tsv(_require(args.train, "training corpus"))
    scfg = _merged(SKETCH_DEFAULTS, "sketch", cfg["sketch"])
    try:
        sk = FrequencySketch(corpus.num_fields, depth=scfg["depth"], width=scfg["width"], eta=scfg["eta"],
                             seed=scfg["seed"])
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None
    sk.insert_corpus(corpus)
    write_bytes(args.out, sketch_bytes(sk))
    write_manifest(_manifest_for(args.out), "build-index", args.config, [args.config, args.train], [args.out],
                   scfg["seed"], started)
    _say(args, f"indexed {sk.total_inserted} field values")


def _calibrate(model, sk, sample_path, validation_path, ecfg, ccfg):
    sample = read_tsv(_require(sample_path, "calibration sample"))
    validation = read_tsv(_require(validation_path, "validation corpus")) if validation_path else None
    n_sample = min(int(ccfg["sample_size"]), len(sample))
    if validation is None:
        # hold out the tail of the sample file for gamma
        n_val = min(int(ccfg["validation_size"]), len(sample))
        validation = sample[len(sample) - n_val:]
    profile = calibrate(model, sk, validation, sample[:n_sample], alpha=ecfg.alpha, beta=ecfg.beta, rho=ecfg.rho,
                        k_max=ecfg.k_max, t_steps=ecfg.t_steps, lam=ecfg.lam)
    if ccfg.get("created_at"):
        profile.created_at = str(ccfg["created_at"])
    return profile


def cmd_calibrate(args, cfg):
    started = _now()
    ecfg = engine_config(cfg)
    ccfg = _merged(CALIB_DEFAULTS, "calibration", cfg["calibration"])
    model = load_model(_require(args.model, "model"))
    sk = load_sketch(_require(args.sketch, "sketch"))
    profile = _calibrate(model, sk, args.sample, args.validation, ecfg, ccfg)
    write_text(args.out, profile_to_json(profile))
    write_manifest(_manifest_for(args.out), "calibrate", args.config,
                   [args.config, args.model, args.sketch, args.sample, args.validation], [args.out],
                   ecfg.base_seed, started)
    _say(args, f"gamma {profile.gamma:.6g}; hash {profile.hyperparams_hash}")


def _engine(model, sk, profile, ecfg, strict):
    expected = ecfg.hyperparams_hash(sk.eta)
    if profile.hyperparams_hash != expected and strict:
        raise DriftError(f"profile hyperparams_hash {profile.hyperparams_hash} differs from engine config {expected}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ProfileDriftWarning)
        eng = Engine(model, sk, profile, ecfg)
    if eng.drift:
        print(f"warning: profile hyperparams_hash {profile.hyperparams_hash} differs from engine config "
              f"{expected}; traces are flagged", file=sys.stderr)
    return eng


def _run_infer(eng, corpus, out, workers):
    with atomic_path(out) as tmp:
        n = write_traces(tmp, eng.infer_batch(corpus, worker_count=workers))
    return n


def cmd_infer(args, cfg):
    started = _now()
    ecfg = engine_config(cfg)
    model = load_model(_require(args.model, "model"))
    sk = load_sketch(_require(args.sketch, "sketch"))
    profile = load_profile(_require(args.profile, "profile"))
    corpus = read_tsv(_require(args.input, "input corpus"))
    eng = _engine(model, sk, profile, ecfg, args.strict)
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    n = _run_infer(eng, corpus, args.out, args.workers)
    write_manifest(_manifest_for(args.out), "infer", args.config,
                   [args.config, args.model, args.sketch, args.profile, args.input], [args.out], ecfg.base_seed,
                   started)
    _say(args, f"wrote {n} traces to {args.out}")


def _labels(corpus):
    return {int(i): int(l) for i, l in zip(corpus.ids, corpus.labels) if l >= 0}


def cmd_eval(args, cfg):
    started = _now()
    traces = read_traces(_require(args.traces, "trace file"))
    labels = _labels(read_tsv(_require(args.labels, "labelled corpus")))
    truth = read_truth(_require(args.truth, "ground-truth table")) if args.truth else None
    k_max = engine_config(cfg).k_max
    rep = report(traces, labels, truth, k_max=k_max)
    write_text(args.out, rep.to_json())
    write_manifest(_manifest_for(args.out), "eval", args.config, [args.config, args.traces, args.labels, args.truth],
                   [args.out], None, started)
    if not args.quiet:
        sys.stdout.write(rep.table())


def parse_grid(items):
    """``["k_max=2,4,8", "lam=1,5"]`` -> ordered {name: [values]}; names must be EngineConfig fields."""
    grid = {}
    allowed = set(EngineConfig.field_names())
    for item in items:
        name, sep, raw = item.partition("=")
        name = ALIASES.get(name.strip(), name.strip())
        if not sep or not raw:
            raise ConfigError(f"grid entry {item!r} must look like name=v1,v2,...")
        if name not in allowed:
            raise ConfigError(f"grid names unknown engine field {name!r}")
        grid[name] = [_parse_value(v.strip()) for v in raw.split(",")]
    return grid


def _grid_from_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"grid file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("grid file must map engine field names to value lists")
    return parse_grid(f"{k}={','.join(json.dumps(v) for v in vs)}" for k, vs in doc.items())


def cmd_sweep(args, cfg):
    started = _now()
    grid = parse_grid(args.param or [])
    if args.grid:
        grid.update(_grid_from_file(args.grid))
    base = asdict(engine_config(cfg))
    ccfg = _merged(CALIB_DEFAULTS, "calibration", cfg["calibration"])
    model = load_model(_require(args.model, "model"))
    sk = load_sketch(_require(args.sketch, "sketch"))
    profile = load_profile(_require(args.profile, "profile"))
    corpus = read_tsv(_require(args.input, "input corpus"))
    labels = _labels(corpus)
    truth = read_truth(_require(args.truth, "ground-truth table")) if args.truth else None

    names = list(grid)
    cells = sorted(itertools.product(*(grid[n] for n in names))) if names else [()]
    os.makedirs(args.out_dir, exist_ok=True)
    summary, outputs = [], []
    cache = {(profile.rho, profile.beta): profile}
    for idx, values in enumerate(cells):
        doc = dict(base, **dict(zip(names, values)))
        ecfg = _build(EngineConfig, "engine", doc)
        key = (ecfg.rho, ecfg.beta)
        if key not in cache:
            if not args.sample:
                raise ConfigError("grid changes rho or beta; --sample is required to re-calibrate")
            cache[key] = _calibrate(model, sk, args.sample, args.validation, ecfg, ccfg)
        cell_profile = cache[key].restamp(ecfg.alpha, ecfg.k_max, ecfg.t_steps, ecfg.lam)
        eng = _engine(model, sk, cell_profile, ecfg, strict=True)
        cell_dir = os.path.join(args.out_dir, f"cell_{idx:03d}")
        os.makedirs(cell_dir, exist_ok=True)
        trace_path = os.path.join(cell_dir, "traces.jsonl")
        _run_infer(eng, corpus, trace_path, args.workers)
        rep = report(read_traces(trace_path), labels, truth, k_max=ecfg.k_max)
        rep_path = os.path.join(cell_dir, "report.json")
        write_text(rep_path, rep.to_json())
        outputs += [trace_path, rep_path]
        summary.append({"cell": idx, "params": dict(zip(names, values)), "auc": rep.auc, "logloss": rep.logloss,
                        "mean_model_calls": rep.mean_model_calls})
    summary_path = os.path.join(args.out_dir, "summary.json")
    write_text(summary_path, json.dumps(summary, indent=2) + "\n")
    write_manifest(os.path.join(args.out_dir, "manifest.json"), "sweep", args.config,
                   [args.config, args.model, args.sketch, args.profile, args.input, args.sample, args.truth],
                   outputs + [summary_path], base["base_seed"], started)
    if not args.quiet:
        header = "\t".join(["cell"] + names + ["auc", "logloss", "mean_model_calls"])
        print(header)
        for row in summary:
            vals = [str(row["params"][n]) for n in names]
            print("\t".join([str(row["cell"])] + vals + [f"{row['auc']:.6f}", f"{row['logloss']:.6f}",
                                                          f"{row['mean_model_calls']:.4f}"]))


def _say(args, msg):
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


# entry point -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="selinfer", description="Selective test-time inference for CTR models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config with engine/synth/train/model/sketch/calibration sections")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key (value parsed as JSON when possible)")
        sp.add_argument("--quiet", action="store_true")
        return sp

    sp = common(sub.add_parser("gen-data", help="generate a synthetic corpus"))
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train", help="train and freeze the reference backbone"))
    sp.add_argument("--train", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("build-index", help="build the frequency sketch"))
    sp.add_argument("--train", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_index)

    sp = common(sub.add_parser("calibrate", help="compute gamma and per-field thresholds"))
    for name in ("--model", "--sketch", "--sample", "--out"):
        sp.add_argument(name, required=True)
    sp.add_argument("--validation", help="validation corpus for gamma (default: tail of the sample)")
    sp.set_defaults(func=cmd_calibrate)

    sp = common(sub.add_parser("infer", help="run selective inference and write traces"))
    for name in ("--model", "--sketch", "--profile", "--input", "--out"):
        sp.add_argument(name, required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--strict", action="store_true", help="treat profile drift as an error")
    sp.set_defaults(func=cmd_infer)

    sp = common(sub.add_parser("eval", help="evaluate traces against labels"))
    sp.add_argument("--traces", required=True)
    sp.add_argument("--labels", required=True, help="labelled TSV corpus")
    sp.add_argument("--truth", help="ground-truth probability table")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("sweep", help="grid over engine hyperparameters"))
    for name in ("--model", "--sketch", "--profile", "--input", "--out-dir"):
        sp.add_argument(name, required=True)
    sp.add_argument("--param", action="append", metavar="NAME=V1,V2,...")
    sp.add_argument("--grid", help="JSON file mapping engine fields to value lists")
    sp.add_argument("--sample", help="calibration sample, needed when rho or beta vary")
    sp.add_argument("--validation")
    sp.add_argument("--truth")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)
    return p


def exit_code(exc):
    if isinstance(exc, (ConfigError, ParameterError, FileNotFoundError)):
        return 1
    if isinstance(exc, (DataError, DivergenceError, OSError)):
        return 2
    return 3


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        args.func(args, cfg)
    except (SelinferError, OSError) as exc:
        print(f"selinfer {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except Exception as exc:  # anything else is a bug
        print(f"selinfer {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
