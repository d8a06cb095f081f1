"""``cmkn`` command line: synthetic data, training, cross-validation, evaluation,
Gram export, interpretation reports and HIVdb conversion.

Every subcommand resolves its configuration as defaults < ``--config`` file <
command-line flags, validates it, and writes it to ``config.json`` in the
output directory. Passing that file back with ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, NumericalError, ParseError
from .interpret import (
    emit_logo,
    global_report,
    global_report_csv,
    global_report_json,
    local_report,
    mean_motif_at,
    position_importance,
)
from .kernel import KernelParams, default_beta, format_gram_csv, format_gram_svm, gram
from .metrics import (
    METRIC_NAMES,
    MetricsReport,
    aggregate_folds,
    compute_metrics,
    format_reports_csv,
)
from .network import ModelConfig, TrainConfig, load_model, predict, save_model, train
from .seqdata import (
    SyntheticConfig,
    convert_hivdb,
    format_fasta,
    generate_synthetic,
    get_alphabet,
    make_rng,
    parse_fasta,
    read_fasta,
    stratified_kfold,
    undersample_negatives,
)

log = logging.getLogger("cmkn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SELECTION_METRICS = ("accuracy", "f1", "auroc", "mcc")


# ---------------------------------------------------------------- config

_DATA_DEFAULTS = {"data": None, "alphabet": "DNA"}

DEFAULTS = {
    "synth": {"synthetic": asdict(SyntheticConfig())},
    "train": {**_DATA_DEFAULTS, "model": asdict(ModelConfig()), "train": asdict(TrainConfig()),
              "holdout": 0.0, "undersample_ratio": 0.0},
    "cv": {**_DATA_DEFAULTS, "model": asdict(ModelConfig()), "train": asdict(TrainConfig()),
           "folds": 5, "grid": {"sigma": [1, 2, 4, 8, 16], "num_anchors": None},
           "undersample_ratio": 0.0},
    "eval": {**_DATA_DEFAULTS, "model": None, "threshold": 0.5},
    "gram": {**_DATA_DEFAULTS, "kernel": {"k": 1, "alpha": 1.0, "beta": None, "sigma": 1.0}, "tile": 32},
    "interpret": {"model": None, "input": None, "window": 11, "top": 10, "letters": 2},
    "hivdb-convert": {"table": None, "reference": None, "drug": None, "thresholds": None,
                      "id_column": "SeqID", "alphabet": "PROTEIN"},
}

# sections whose inner keys are validated by the owning dataclass, not here
_OPEN_SECTIONS = {"synthetic", "model", "train", "kernel", "grid"}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(out[key], dict) and key not in _OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            out[key] = _merge(out[key], value, path + key + ".")
        elif isinstance(out[key], dict) and isinstance(value, dict):
            merged = copy.deepcopy(out[key])
            merged.update(value)
            out[key] = merged
        else:
            out[key] = value
    return out


def _load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def resolve_config(command, args):
    cfg = copy.deepcopy(DEFAULTS[command])
    if args.config:
        cfg = _merge(cfg, _load_config_file(args.config))
    for key in ("data", "model", "input", "table", "reference", "drug", "alphabet"):
        value = getattr(args, key, None)
        if value is not None and key in cfg:
            cfg[key] = value
    if getattr(args, "threshold", None) is not None:
        cfg["threshold"] = args.threshold
    if getattr(args, "freeze_positions", None):
        cfg["train"]["freeze_positions"] = True
    if args.seed is not None:
        if command == "synth":
            cfg["synthetic"]["seed"] = args.seed
        elif command in ("train", "cv"):
            cfg["train"]["seed"] = args.seed
    return cfg


def _require(cfg, *keys):
    for key in keys:
        if cfg.get(key) in (None, ""):
            raise ConfigError(f"missing required setting {key!r} (flag --{key.replace('_', '-')} or config)")


def _model_config(section):
    try:
        return ModelConfig(**section)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from None


def _train_config(section):
    try:
        return TrainConfig(**section)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from None


# ---------------------------------------------------------------- output

class Outputs:
    """Collects output files so existing ones are detected before any work starts."""

    def __init__(self, out_dir, force, names):
        self.dir = Path(out_dir)
        self.force = force
        existing = [n for n in names if (self.dir / n).exists()]
        if existing and not force:
            raise ConfigError(f"output files already exist in {self.dir}: {', '.join(existing)} "
                              "(use --force to overwrite)")
        self.dir.mkdir(parents=True, exist_ok=True)

    def write(self, name, text):
        path = self.dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        log.info("wrote %s", path)
        return path


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_dataset(cfg, require_labels=True):
    _require(cfg, "data")
    alphabet = get_alphabet(cfg["alphabet"])
    return read_fasta(cfg["data"], alphabet, require_labels=require_labels)


def _binary_scores(model, seqs):
    if len(model.class_names) != 2:
        raise ConfigError("metrics are defined for binary models only")
    return predict(model, list(seqs))[:, 1]


# --------------------------------------------------------------- commands

def cmd_synth(cfg, args):
    try:
        config = SyntheticConfig.from_dict(cfg["synthetic"])
    except TypeError as exc:
        raise ConfigError(f"bad synthetic config: {exc}") from None
    cfg["synthetic"] = config.to_dict()
    out = Outputs(args.out_dir, args.force, ["synthetic.fasta", "ground_truth.json", "config.json"])
    ds, starts = generate_synthetic(config, return_starts=True)
    truth = {
        "config": config.to_dict(),
        "motif_starts": {s.id: int(p) for s, p in zip(ds.sequences, starts)},
    }
    out.write("synthetic.fasta", format_fasta(ds))
    out.write("ground_truth.json", _dump(truth))
    out.write("config.json", _dump(cfg))


def holdout_split(labels, fraction, seed):
    """Stratified split: ``floor(fraction * n_c)`` samples of every class are held out."""
    rng = make_rng(seed)
    held = []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        held.extend(idx[:int(fraction * len(idx))].tolist())
    held = np.sort(np.array(held, dtype=np.int64))
    keep = np.setdiff1d(np.arange(len(labels)), held)
    return keep, held


def _history_csv(history):
    lines = ["epoch,loss,lr,accuracy"]
    lines += [f"{h['epoch']},{h['loss']:.17g},{h['lr']:.17g},{h['accuracy']:.17g}" for h in history]
    return "\n".join(lines) + "\n"


def cmd_train(cfg, args):
    mc = _model_config(cfg["model"])
    tc = _train_config(cfg["train"])
    if not 0 <= cfg["holdout"] < 1:
        raise ConfigError("holdout must lie in [0, 1)")
    names = ["model.json", "history.csv", "config.json"]
    if cfg["holdout"] > 0:
        names.append("holdout_metrics.json")
    ds = _load_dataset(cfg)
    out = Outputs(args.out_dir, args.force, names)
    train_ds, test_ds = ds, None
    if cfg["holdout"] > 0:
        keep, held = holdout_split(ds.labels, cfg["holdout"], tc.seed)
        train_ds, test_ds = ds.subset(keep), ds.subset(held)
    if cfg["undersample_ratio"] > 0:
        train_ds = undersample_negatives(train_ds, cfg["undersample_ratio"], tc.seed)
    model, history = train(train_ds, mc, tc)
    save_model(model, out.dir / "model.json")
    out.write("history.csv", _history_csv(history))
    if test_ds is not None and len(test_ds):
        report = compute_metrics(test_ds.labels, _binary_scores(model, test_ds.sequences))
        out.write("holdout_metrics.json", _dump(report.to_dict()))
    out.write("config.json", _dump(cfg))


def fold_hash(folds):
    h = hashlib.sha256()
    for _, val in folds:
        h.update(np.asarray(val, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()


def select_grid_point(rows):
    """Index of the winning grid point.

    ``rows`` holds ``{"sigma", "num_anchors", "means": {metric: value}}``. A point
    wins a metric when its mean equals the best mean (ties all win). The most
    wins decides; ties go to the higher MCC, then fewer anchors, then grid order.
    """
    wins = [0] * len(rows)
    for metric in SELECTION_METRICS:
        values = [r["means"].get(metric) for r in rows]
        defined = [v for v in values if v is not None]
        if not defined:
            continue
        best = max(defined)
        for i, v in enumerate(values):
            if v is not None and v == best:
                wins[i] += 1

    def key(i):
        mcc = rows[i]["means"].get("mcc")
        return (-wins[i], -(mcc if mcc is not None else -np.inf), rows[i]["num_anchors"], i)

    return min(range(len(rows)), key=key), wins


def cmd_cv(cfg, args):
    mc = _model_config(cfg["model"])
    tc = _train_config(cfg["train"])
    grid = cfg["grid"]
    unknown = set(grid) - {"sigma", "num_anchors"}
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)}")
    sigmas = grid.get("sigma") or [mc.sigma]
    anchors = grid.get("num_anchors") or [mc.num_anchors]
    cfg["grid"] = {"sigma": list(sigmas), "num_anchors": list(anchors)}
    folds_n = int(cfg["folds"])
    ds = _load_dataset(cfg)
    out = Outputs(args.out_dir, args.force,
                  ["folds.json", "cv_metrics.csv", "cv_aggregate.csv", "selection.json", "config.json"])
    try:
        folds = stratified_kfold(ds.labels, folds_n, tc.seed)
    except ValueError as exc:
        raise ConfigError(f"infeasible folds: {exc}") from None
    fhash = fold_hash(folds)
    out.write("folds.json", _dump({"hash": fhash, "validation": [v.tolist() for _, v in folds]}))

    def run_fold(job):
        sigma, n_anchor, f = job
        tr_idx, va_idx = folds[f]
        train_ds = ds.subset(tr_idx)
        if cfg["undersample_ratio"] > 0:
            train_ds = undersample_negatives(train_ds, cfg["undersample_ratio"], tc.seed + f)
        point = ModelConfig(**{**asdict(mc), "sigma": sigma, "num_anchors": n_anchor})
        model, _ = train(train_ds, point, tc)
        val = ds.subset(va_idx)
        return compute_metrics(val.labels, _binary_scores(model, val.sequences))

    jobs = [(float(s), int(a), f) for s in sigmas for a in anchors for f in range(folds_n)]
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            reports = list(pool.map(run_fold, jobs))
    else:
        reports = [run_fold(j) for j in jobs]

    extra = [{"sigma": s, "num_anchors": a, "fold": f, "fold_hash": fhash} for s, a, f in jobs]
    out.write("cv_metrics.csv", format_reports_csv(reports, extra))
    rows = []
    agg_lines = ["sigma,num_anchors," + ",".join(f"{m}_mean,{m}_std" for m in METRIC_NAMES)]
    for gi in range(0, len(jobs), folds_n):
        sigma, n_anchor, _ = jobs[gi]
        agg = aggregate_folds(reports[gi:gi + folds_n])
        rows.append({"sigma": sigma, "num_anchors": n_anchor,
                     "means": {m: agg[m][0] for m in METRIC_NAMES},
                     "stds": {m: agg[m][1] for m in METRIC_NAMES}})
        cells = [f"{sigma:.17g}", str(n_anchor)]
        for m in METRIC_NAMES:
            mean, std = agg[m]
            cells += ["" if mean is None else f"{mean:.17g}", "" if std is None else f"{std:.17g}"]
        agg_lines.append(",".join(cells))
    out.write("cv_aggregate.csv", "\n".join(agg_lines) + "\n")
    best, wins = select_grid_point(rows)
    out.write("selection.json", _dump({"best": rows[best], "wins": wins, "grid": rows}))
    out.write("config.json", _dump(cfg))


def cmd_eval(cfg, args):
    _require(cfg, "model", "data")
    fmt = args.format or "json"
    if fmt not in ("json", "csv"):
        raise ConfigError("eval writes json or csv")
    model = load_model(cfg["model"])
    cfg["alphabet"] = model.alphabet.name
    ds = read_fasta(cfg["data"], model.alphabet, class_names=model.class_names)
    name = f"metrics.{fmt}"
    out = Outputs(args.out_dir, args.force, [name, "config.json"])
    report = compute_metrics(ds.labels, _binary_scores(model, ds.sequences), cfg["threshold"])
    if fmt == "json":
        out.write(name, _dump(report.to_dict()))
    else:
        out.write(name, MetricsReport.csv_header() + "\n" + report.csv_row() + "\n")
    out.write("config.json", _dump(cfg))


def cmd_gram(cfg, args):
    fmt = args.format or "csv"
    ds = _load_dataset(cfg, require_labels=False)
    lengths = set(ds.lengths.tolist())
    kern = dict(cfg["kernel"])
    if kern.get("beta") is None:
        if len(lengths) != 1:
            raise ConfigError("beta must be given when sequence lengths differ")
        kern["beta"] = default_beta(lengths.pop())
    try:
        params = KernelParams(**kern)
    except TypeError as exc:
        raise ConfigError(f"bad kernel config: {exc}") from None
    cfg["kernel"] = params.to_dict()
    name = f"gram.{fmt}"
    out = Outputs(args.out_dir, args.force, [name, "config.json"])
    matrix = gram(ds, params, tile=int(cfg["tile"]), threads=args.threads)
    if fmt == "csv":
        text = format_gram_csv(matrix)
    elif fmt == "svm":
        labels = np.array([0 if s.label is None else s.label for s in ds.sequences])
        text = format_gram_svm(matrix, labels)
    else:
        text = _dump({"ids": [s.id for s in ds.sequences], "matrix": matrix.tolist()})
    out.write(name, text)
    out.write("config.json", _dump(cfg))


def _safe_name(text):
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in text)


def cmd_interpret(cfg, args):
    _require(cfg, "model")
    model = load_model(cfg["model"])
    inputs = None
    if cfg["input"]:
        inputs = read_fasta(cfg["input"], model.alphabet, require_labels=False,
                            class_names=model.class_names)
        for seq in inputs.sequences:
            model.check_input(seq)
    report = global_report(model, int(cfg["window"]), int(cfg["top"]), int(cfg["letters"]))
    names = ["global_report.json", "global_report.csv", "config.json"]
    logos = []
    importances = {}
    for c, cname in enumerate(report):
        importances[c] = position_importance(model, c)
        for pk in report[cname]["peaks"]:
            if not pk["empty"]:
                logos.append((c, pk["position"], f"logos/{_safe_name(cname)}_p{pk['position']}.svg"))
    names += [n for _, _, n in logos]
    local_names = []
    if inputs is not None:
        local_names = [f"local/{i:05d}_{_safe_name(s.id)}.json" for i, s in enumerate(inputs.sequences)]
        names += local_names
    out = Outputs(args.out_dir, args.force, names)
    out.write("global_report.json", global_report_json(report))
    out.write("global_report.csv", global_report_csv(report))
    for c, p, name in logos:
        out.write(name, emit_logo(mean_motif_at(model, p, c, importances[c])))
    if inputs is not None:
        # local reports cover the union of every class's top peaks
        positions = sorted({pk["position"] for entry in report.values() for pk in entry["peaks"]})
        for name, seq in zip(local_names, inputs.sequences):
            out.write(name, local_report(model, seq, positions, importances).to_json())
    out.write("config.json", _dump(cfg))


def _read_text(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def cmd_hivdb_convert(cfg, args):
    _require(cfg, "table", "reference", "drug", "thresholds")
    thresholds = cfg["thresholds"]
    if isinstance(thresholds, str):
        try:
            thresholds = [float(v) for v in thresholds.split(",")]
        except ValueError:
            raise ConfigError(f"thresholds must be 'low,high', got {thresholds!r}") from None
    if isinstance(thresholds, list) and len(thresholds) != 2:
        raise ConfigError("thresholds must hold a low and a high cutoff")
    cfg["thresholds"] = thresholds
    reference = cfg["reference"]
    if os.path.exists(reference):
        text = _read_text(reference)
        reference = "".join(ln.strip() for ln in text.splitlines() if not ln.startswith(">"))
    name = f"{_safe_name(cfg['drug'])}.fasta"
    out = Outputs(args.out_dir, args.force, [name, "config.json"])
    fasta = convert_hivdb(_read_text(cfg["table"]), reference, thresholds, cfg["drug"], cfg["id_column"])
    # re-parse so every residue is checked against the alphabet
    parse_fasta(fasta, get_alphabet(cfg["alphabet"]))
    out.write(name, fasta)
    out.write("config.json", _dump(cfg))


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "cv": cmd_cv,
    "eval": cmd_eval,
    "gram": cmd_gram,
    "interpret": cmd_interpret,
    "hivdb-convert": cmd_hivdb_convert,
}


# ------------------------------------------------------------------ parser

def build_parser():
    parser = argparse.ArgumentParser(prog="cmkn", description="Convolutional motif kernel networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, formats=None):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out-dir", default=".")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--format", choices=formats or ("csv", "json", "svm"))
        return p

    common(sub.add_parser("synth", help="generate the synthetic two-motif dataset"))
    for name, text in (("train", "train one model"), ("cv", "stratified cross-validation with a grid search")):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--data")
        p.add_argument("--alphabet")
        p.add_argument("--freeze-positions", action="store_true", default=None,
                       help="keep anchor positions at their k-means initialisation")
    p = common(sub.add_parser("eval", help="metrics of a trained model on a labelled FASTA"), ("csv", "json"))
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--threshold", type=float)
    p = common(sub.add_parser("gram", help="export the kernel Gram matrix"))
    p.add_argument("--data")
    p.add_argument("--alphabet")
    p = common(sub.add_parser("interpret", help="importance, peaks, motifs, logos, local reports"))
    p.add_argument("--model")
    p.add_argument("--input", help="FASTA of sequences to explain")
    p = common(sub.add_parser("hivdb-convert", help="HIVdb table to labelled FASTA"))
    p.add_argument("--table")
    p.add_argument("--reference", help="reference sequence or a FASTA file holding it")
    p.add_argument("--drug")
    p.add_argument("--thresholds", help="low,high fold-change cutoffs")
    return parser


def _setup_logging():
    level = os.environ.get("CMKN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve_config(args.command, args)
        if getattr(args, "thresholds", None) is not None:
            cfg["thresholds"] = args.thresholds
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
