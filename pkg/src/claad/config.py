"""Run configuration: flat key=value text with documented defaults.

Every key is optional; unknown keys are rejected by name. The effective
configuration is echoed into the run directory, and the run directory
name carries a hash over all non-seed keys plus the seed itself, so
reruns of one configuration land in one place.
"""

import hashlib

from .errors import ConfigError
from .model import ModelConfig
from .losses import LossConfig
from .sigproc import EnvelopeConfig, FilterSpec
from .dataset import SynthConfig
from .trainer import TrainConfig

DEFAULTS = {
    "seed": "0",
    "out.dir": "runs",
    "data.dir": "",
    "report.source": "metrics.csv",
    "target_fs": "64.0",
    # name of the reference channel; empty disables re-referencing, since
    # the trial container stores no channel names (conversion tools that
    # produce named channels should subtract the reference up front)
    "prep.reference": "",
    "filter.low_hz": "1.0",
    "filter.high_hz": "9.0",
    "filter.order": "4",
    "envelope.f_lo": "150.0",
    "envelope.f_hi": "4000.0",
    "envelope.n_bands": "28",
    "envelope.exponent": "0.6",
    "csp.n_components": "64",
    "csp.shrinkage": "0.05",
    "window.seconds": "0.5,2,5",
    "window.overlap": "0.5",
    "split.scheme": "kfold_per_subject",
    "split.k": "5",
    "model.d_model": "320",
    "model.n_heads": "8",
    "model.n_blocks": "5",
    "model.d_repr": "50",
    "model.probe_hidden": "25",
    "model.clf_dims": "100,50,2",
    "train.lr": "0.001",
    "train.beta1": "0.9",
    "train.beta2": "0.99",
    "train.epochs": "40",
    "train.batch_size": "32",
    "train.eps_adam": "1e-8",
    "train.noise_sigma": "1.0",
    "train.grad_clip": "0.0",
    "loss.temperature": "1.0",
    "loss.normalize": "true",
    "synth.n_subjects": "6",
    "synth.trials_per_subject": "8",
    "synth.trial_seconds": "20.0",
    "synth.snr_db": "5.0",
}


def parse_config_text(text):
    """Parse `key = value` lines; '#' starts a comment, blanks are skipped."""
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw_line!r}")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = value.strip()
    return values


def load_config(path=None, overrides=None):
    """Defaults, then the file, then explicit overrides; returns raw strings."""
    raw = dict(DEFAULTS)
    if path is not None:
        try:
            text = open(path, "r", encoding="utf-8").read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}")
        raw.update(parse_config_text(text))
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        raw[key] = str(value)
    return raw


def canonical_lines(raw):
    return [f"{key} = {raw[key]}" for key in sorted(raw)]


def config_hash(raw):
    """Hex digest over every canonical line except the seed."""
    lines = [line for line in canonical_lines(raw) if not line.startswith("seed ")]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:8]


def _parse(raw, key, convert, describe):
    try:
        return convert(raw[key])
    except (ValueError, TypeError):
        raise ConfigError(f"config key {key} must be {describe}, got {raw[key]!r}")


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(text)


def _float_list(text):
    items = [part.strip() for part in text.split(",") if part.strip()]
    if not items:
        raise ValueError(text)
    return tuple(float(part) for part in items)


def _int_list(text):
    return tuple(int(part.strip()) for part in text.split(",") if part.strip())


class RunConfig:
    """Typed view over the raw mapping; construction validates every key."""

    def __init__(self, raw):
        self.raw = dict(raw)
        self.seed = _parse(raw, "seed", int, "an integer")
        self.out_dir = raw["out.dir"]
        self.data_dir = raw["data.dir"]
        self.report_source = raw["report.source"]
        self.target_fs = _parse(raw, "target_fs", float, "a number")
        self.prep_reference = raw["prep.reference"]
        self.csp_components = _parse(raw, "csp.n_components", int, "an integer")
        self.csp_shrinkage = _parse(raw, "csp.shrinkage", float, "a number")
        self.window_seconds = _parse(raw, "window.seconds", _float_list,
                                     "a comma list of numbers")
        self.window_overlap = _parse(raw, "window.overlap", float, "a number")
        self.split_scheme = raw["split.scheme"]
        if self.split_scheme not in ("kfold_per_subject", "leave_one_subject_out"):
            raise ConfigError(
                f"config key split.scheme must be kfold_per_subject or "
                f"leave_one_subject_out, got {self.split_scheme!r}")
        self.split_k = _parse(raw, "split.k", int, "an integer")
        if self.target_fs <= 0:
            raise ConfigError(f"config key target_fs must be positive, got {self.target_fs}")
        if any(ws <= 0 for ws in self.window_seconds):
            raise ConfigError("config key window.seconds must be positive numbers")

        try:
            self.filter_spec = FilterSpec(
                kind="bandpass",
                low_hz=_parse(raw, "filter.low_hz", float, "a number"),
                high_hz=_parse(raw, "filter.high_hz", float, "a number"),
                order=_parse(raw, "filter.order", int, "an integer"),
            )
            self.envelope = EnvelopeConfig(
                f_lo=_parse(raw, "envelope.f_lo", float, "a number"),
                f_hi=_parse(raw, "envelope.f_hi", float, "a number"),
                n_bands=_parse(raw, "envelope.n_bands", int, "an integer"),
                exponent=_parse(raw, "envelope.exponent", float, "a number"),
                out_fs=self.target_fs,
                post_band=(float(raw["filter.low_hz"]), float(raw["filter.high_hz"])),
                post_order=int(raw["filter.order"]),
            )
            self.loss = LossConfig(
                temperature=_parse(raw, "loss.temperature", float, "a number"),
                normalize_embeddings=_parse(raw, "loss.normalize", _bool, "a boolean"),
            )
            self.synth = SynthConfig(
                n_subjects=_parse(raw, "synth.n_subjects", int, "an integer"),
                trials_per_subject=_parse(raw, "synth.trials_per_subject", int,
                                          "an integer"),
                trial_seconds=_parse(raw, "synth.trial_seconds", float, "a number"),
                snr_db=_parse(raw, "synth.snr_db", float, "a number"),
                seed=self.seed,
            )
            self._model_kwargs = dict(
                d_model=_parse(raw, "model.d_model", int, "an integer"),
                n_heads=_parse(raw, "model.n_heads", int, "an integer"),
                n_blocks=_parse(raw, "model.n_blocks", int, "an integer"),
                d_repr=_parse(raw, "model.d_repr", int, "an integer"),
                probe_hidden=_parse(raw, "model.probe_hidden", int, "an integer"),
                clf_dims=_parse(raw, "model.clf_dims", _int_list,
                                "a comma list of integers"),
                in_channels=self.csp_components,
            )
            ModelConfig(**self._model_kwargs)  # validate once, eagerly
            self.train = TrainConfig(
                lr=_parse(raw, "train.lr", float, "a number"),
                beta1=_parse(raw, "train.beta1", float, "a number"),
                beta2=_parse(raw, "train.beta2", float, "a number"),
                epochs=_parse(raw, "train.epochs", int, "an integer"),
                batch_size=_parse(raw, "train.batch_size", int, "an integer"),
                eps_adam=_parse(raw, "train.eps_adam", float, "a number"),
                seed=self.seed,
                noise_sigma=_parse(raw, "train.noise_sigma", float, "a number"),
                grad_clip=_parse(raw, "train.grad_clip", float, "a number"),
            )
        except ValueError as exc:
            raise ConfigError(str(exc))

    def model_config(self, window_len):
        return ModelConfig(window_len=window_len, **self._model_kwargs)
