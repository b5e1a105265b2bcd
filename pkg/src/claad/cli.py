"""Command line entry point.

Subcommands: prep (raw recordings -> 64 Hz trials), synth (generate a
dataset), train (fit per fold and window length), eval (re-score saved
checkpoints), report (aggregate metrics). All outputs of one
configuration land in one run directory named by config hash and seed;
a lock file keeps concurrent invocations out of it.

Exit codes: 0 success, 1 configuration error, 2 data error,
3 numerical failure.
"""

import argparse
import sys
from pathlib import Path

from .config import RunConfig, canonical_lines, config_hash, load_config
from .csp import LabeledEpoch, csp_fit
from .dataset import (
    TrialRecording,
    kfold_split,
    load_dataset,
    loso_split,
    make_windows,
    save_dataset,
    synth_generate,
)
from .errors import (
    ConfigError,
    CorruptFileError,
    DataError,
    IllConditionedError,
    InsufficientClassesError,
    MissingChannelError,
    NumericalError,
)
from .sigproc import bandpass_filter, gammatone_envelope, rereference, resample
from .trainer import evaluate_accuracy, fit, load_checkpoint, save_checkpoint

METRICS_HEADER = "subject,window_s,fold,n_examples,accuracy"


def build_parser():
    parser = argparse.ArgumentParser(
        prog="claad",
        description="Contrastive auditory-attention decoding pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("prep", "filter, re-reference, and resample raw recordings"),
        ("synth", "generate a synthetic cocktail-party dataset"),
        ("train", "fit models over the split plan"),
        ("eval", "score saved checkpoints on their validation folds"),
        ("report", "aggregate a metrics table into summary files"),
    ):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", default=None, help="key = value config file")
        cmd.add_argument("--out", default=None, help="override out.dir")
        cmd.add_argument("--seed", type=int, default=None, help="override seed")
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse uses its own codes; usage problems are config errors here
        return 0 if exc.code in (0, None) else 1
    try:
        return _dispatch(args)
    except (ConfigError, ValueError) as exc:
        return _fail(1, exc)
    except (DataError, MissingChannelError, InsufficientClassesError,
            FileNotFoundError) as exc:
        return _fail(2, exc)
    except (NumericalError, IllConditionedError) as exc:
        return _fail(3, exc)


def _fail(code, exc):
    print(f"claad: error: {exc}", file=sys.stderr)
    return code


_COMMANDS = {}


def _dispatch(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out.dir"] = args.out
    raw = load_config(args.config, overrides)
    cfg = RunConfig(raw)
    run_dir = Path(cfg.out_dir) / f"run-{config_hash(raw)}-s{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / ".lock"
    try:
        lock = open(lock_path, "x")
    except FileExistsError:
        raise ConfigError(f"run directory {run_dir} is locked by another invocation")
    try:
        text = "\n".join(canonical_lines(raw)) + "\n"
        (run_dir / "config.txt").write_text(text, encoding="utf-8")
        _COMMANDS[args.command](cfg, run_dir)
    finally:
        lock.close()
        lock_path.unlink(missing_ok=True)
    return 0


def _command(name):
    def register(fn):
        _COMMANDS[name] = fn
        return fn
    return register


def _dataset_dir(cfg, run_dir):
    return Path(cfg.data_dir) if cfg.data_dir else run_dir / "dataset"


# ---------------------------------------------------------------------------
# Subcommands


@_command("synth")
def _cmd_synth(cfg, run_dir):
    save_dataset(synth_generate(cfg.synth), _dataset_dir(cfg, run_dir))


@_command("prep")
def _cmd_prep(cfg, run_dir):
    if not cfg.data_dir:
        raise ConfigError("prep needs data.dir pointing at the raw dataset")
    processed = []
    for trial in load_dataset(cfg.data_dir):
        eeg = trial.eeg
        if cfg.prep_reference:
            eeg = rereference(eeg, cfg.prep_reference)
        eeg = resample(bandpass_filter(eeg, cfg.filter_spec), cfg.target_fs)
        processed.append(TrialRecording(
            trial_id=trial.trial_id,
            eeg=eeg,
            env_a=gammatone_envelope(trial.env_a, cfg.envelope),
            env_b=gammatone_envelope(trial.env_b, cfg.envelope),
            attended=trial.attended,
            subject_id=trial.subject_id,
            condition=trial.condition,
        ))
    save_dataset(processed, run_dir / "dataset")


def _window_all(trials, csp_model, window_seconds, overlap):
    examples = []
    for trial in trials:
        examples.extend(make_windows(trial, csp_model, window_seconds, overlap))
    return examples


def _split_plan(examples, cfg):
    if cfg.split_scheme == "leave_one_subject_out":
        return loso_split(examples)
    return kfold_split(examples, k=cfg.split_k, seed=cfg.seed)


def _checkpoint_name(window_seconds, fold):
    return f"w{window_seconds:g}_f{fold}.ckpt"


def _metric_rows(val_examples, checkpoint, window_seconds, fold):
    rows = []
    for (subject, _), entry in sorted(evaluate_accuracy(val_examples, checkpoint).items()):
        rows.append((subject, window_seconds, fold,
                     entry["n_examples"], entry["accuracy"]))
    return rows


def _write_metrics(path, rows):
    lines = [METRICS_HEADER]
    for subject, window_seconds, fold, n_examples, accuracy in sorted(rows):
        lines.append(f"{subject},{window_seconds:g},{fold},{n_examples},{accuracy!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_metrics(path):
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError:
        raise ConfigError(f"no metrics table at {path}")
    if not lines or lines[0] != METRICS_HEADER:
        raise CorruptFileError(path, f"expected header {METRICS_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise CorruptFileError(path, f"line {lineno}: expected 5 fields")
        try:
            rows.append((parts[0], float(parts[1]), int(parts[2]),
                         int(parts[3]), float(parts[4])))
        except ValueError:
            raise CorruptFileError(path, f"line {lineno}: malformed numbers")
    return rows


@_command("train")
def _cmd_train(cfg, run_dir):
    trials = load_dataset(_dataset_dir(cfg, run_dir))
    trial_map = {trial.trial_id: trial for trial in trials}
    checkpoint_dir = run_dir / "checkpoints"
    checkpoint_dir.mkdir(exist_ok=True)
    rows = []
    for window_seconds in cfg.window_seconds:
        raw_examples = _window_all(trials, None, window_seconds, cfg.window_overlap)
        if not raw_examples:
            raise ConfigError(
                f"window.seconds {window_seconds:g} yields no windows; trials are shorter")
        plan = _split_plan(raw_examples, cfg)
        for fold, (train_ids, val_ids) in enumerate(plan.folds):
            train_trials = sorted({eid.rsplit(":", 1)[0] for eid in train_ids})
            epochs = [LabeledEpoch(trial_map[tid].eeg, trial_map[tid].attended)
                      for tid in train_trials]
            csp_model = csp_fit(epochs, n_components=cfg.csp_components,
                                shrinkage=cfg.csp_shrinkage)
            projected = _window_all(trials, csp_model, window_seconds, cfg.window_overlap)
            train_examples = [ex for ex in projected if ex.example_id in train_ids]
            val_examples = [ex for ex in projected if ex.example_id in val_ids]
            model_cfg = cfg.model_config(train_examples[0].features.shape[1])
            checkpoint, _ = fit(train_examples, val_examples, cfg.train,
                                model_cfg, cfg.loss, csp_model)
            save_checkpoint(checkpoint,
                            checkpoint_dir / _checkpoint_name(window_seconds, fold))
            rows.extend(_metric_rows(val_examples, checkpoint, window_seconds, fold))
    _write_metrics(run_dir / "metrics.csv", rows)


@_command("eval")
def _cmd_eval(cfg, run_dir):
    trials = load_dataset(_dataset_dir(cfg, run_dir))
    checkpoint_dir = run_dir / "checkpoints"
    paths = sorted(checkpoint_dir.glob("w*_f*.ckpt")) if checkpoint_dir.is_dir() else []
    if not paths:
        raise DataError(f"no checkpoints under {checkpoint_dir}; run train first")
    plans = {}
    rows = []
    for path in paths:
        stem = path.stem
        window_seconds = float(stem[1:].rsplit("_f", 1)[0])
        fold = int(stem.rsplit("_f", 1)[1])
        if window_seconds not in plans:
            raw_examples = _window_all(trials, None, window_seconds, cfg.window_overlap)
            plans[window_seconds] = _split_plan(raw_examples, cfg)
        val_ids = plans[window_seconds].folds[fold][1]
        checkpoint = load_checkpoint(path)
        projected = _window_all(trials, checkpoint.csp, window_seconds,
                                cfg.window_overlap)
        val_examples = [ex for ex in projected if ex.example_id in val_ids]
        rows.extend(_metric_rows(val_examples, checkpoint, window_seconds, fold))
    _write_metrics(run_dir / "eval_metrics.csv", rows)


@_command("report")
def _cmd_report(cfg, run_dir):
    rows = _read_metrics(run_dir / cfg.report_source)
    if not rows:
        raise ConfigError(f"metrics table {run_dir / cfg.report_source} is empty")

    by_window = {}
    by_subject_window = {}
    for subject, window_seconds, _fold, _n, accuracy in rows:
        by_window.setdefault(window_seconds, []).append(accuracy)
        by_subject_window.setdefault((subject, window_seconds), []).append(accuracy)

    summary = ["window_s,mean_accuracy"]
    for window_seconds in sorted(by_window):
        values = by_window[window_seconds]
        summary.append(f"{window_seconds:g},{sum(values) / len(values)!r}")
    (run_dir / "summary.csv").write_text("\n".join(summary) + "\n", encoding="utf-8")

    per_subject = ["subject,window_s,mean,min,max"]
    for subject, window_seconds in sorted(by_subject_window):
        values = by_subject_window[(subject, window_seconds)]
        per_subject.append(
            f"{subject},{window_seconds:g},{sum(values) / len(values)!r},"
            f"{min(values)!r},{max(values)!r}")
    (run_dir / "per_subject.csv").write_text("\n".join(per_subject) + "\n",
                                             encoding="utf-8")


if __name__ == "__main__":
    sys.exit(main())
