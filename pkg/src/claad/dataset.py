"""Trial storage, windowing, splits, augmentation, and a synthetic generator.

A dataset on disk is a directory with a ``manifest.tsv`` listing one trial
per row and three binary array files per trial (EEG, envelope A, envelope
B). Array files carry a 16-byte header (magic ``CLAD``, u32 rows, u32
cols, u32 sample rate in mHz, all little-endian) followed by a row-major
little-endian float32 payload, so round-trips are bit-exact.
"""

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .csp import CspModel, csp_transform
from .errors import ConfigError, CorruptFileError, DataError
from .sigproc import FilterSpec, MultiChannelRecording, Waveform, bandpass_filter

_MAGIC = b"CLAD"
_HEADER = struct.Struct("<4sIII")
_MANIFEST_COLUMNS = (
    "trial_id",
    "subject_id",
    "condition",
    "attended",
    "eeg_file",
    "env_a_file",
    "env_b_file",
)


@dataclass
class TrialRecording:
    """One listening trial: preprocessed EEG plus the two candidate envelopes."""

    trial_id: str
    eeg: MultiChannelRecording
    env_a: Waveform
    env_b: Waveform
    attended: int
    subject_id: str
    condition: str

    def __post_init__(self):
        if self.attended not in (0, 1):
            raise ValueError(f"attended must be 0 or 1, got {self.attended}")
        n = self.eeg.n_samples
        if self.env_a.n_samples != n or self.env_b.n_samples != n:
            raise ValueError(
                f"trial {self.trial_id}: eeg has {n} samples, envelopes have "
                f"{self.env_a.n_samples} and {self.env_b.n_samples}"
            )
        if not (self.eeg.fs == self.env_a.fs == self.env_b.fs):
            raise ValueError(f"trial {self.trial_id}: sample rates disagree")

    @property
    def n_samples(self):
        return self.eeg.n_samples


@dataclass
class WindowedExample:
    """A fixed-length decision window cut from one trial."""

    features: np.ndarray
    env_a: np.ndarray
    env_b: np.ndarray
    label: int
    subject_id: str
    trial_id: str
    window_index: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.env_a = np.asarray(self.env_a, dtype=np.float64)
        self.env_b = np.asarray(self.env_b, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        length = self.features.shape[1]
        if self.env_a.shape != (length,) or self.env_b.shape != (length,):
            raise ValueError("envelope length must match the feature window")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    @property
    def example_id(self):
        return f"{self.trial_id}:{self.window_index}"


@dataclass(frozen=True)
class SplitPlan:
    """Train/validation example-id sets for each cross-validation fold."""

    folds: tuple
    scheme: str
    seed: int

    def __post_init__(self):
        if self.scheme not in ("kfold_per_subject", "leave_one_subject_out"):
            raise ValueError(f"unknown split scheme {self.scheme!r}")
        for train, val in self.folds:
            if train & val:
                raise ValueError("train and validation sets overlap")

    @property
    def n_folds(self):
        return len(self.folds)


@dataclass
class AugmentConfig:
    noise_sigma: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be finite and >= 0, got {self.noise_sigma}")


@dataclass
class SynthConfig:
    """Sizes and difficulty of the synthetic cocktail-party dataset."""

    n_subjects: int = 6
    trials_per_subject: int = 8
    trial_seconds: float = 20.0
    snr_db: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.trials_per_subject < 1:
            raise ValueError("subject and trial counts must be >= 1")
        if self.trial_seconds <= 0:
            raise ValueError("trial_seconds must be positive")


@dataclass
class StandardizeStats:
    """Per-channel feature statistics and pooled envelope statistics."""

    feature_mean: np.ndarray
    feature_std: np.ndarray
    env_mean: float
    env_std: float


# ---------------------------------------------------------------------------
# Binary array container


def write_array_file(path, data, fs):
    """Write a 2-D array as a headered little-endian float32 file."""
    arr = np.ascontiguousarray(np.atleast_2d(np.asarray(data)), dtype="<f4")
    rows, cols = arr.shape
    rate_mhz = int(round(fs * 1000.0))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, rows, cols, rate_mhz))
        fh.write(arr.tobytes())


def read_array_file(path):
    """Read a headered float32 file. Returns (float64 array [rows, cols], fs)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptFileError(path, f"header needs {_HEADER.size} bytes, file has {len(raw)}")
    magic, rows, cols, rate_mhz = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise CorruptFileError(path, f"bad magic {magic!r}")
    expected = _HEADER.size + rows * cols * 4
    if len(raw) != expected:
        raise CorruptFileError(
            path, f"{rows}x{cols} float32 payload implies {expected} bytes, file has {len(raw)}"
        )
    payload = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return payload.reshape(rows, cols).astype(np.float64), rate_mhz / 1000.0


def save_dataset(trials, root_dir):
    """Write trials and a manifest under root_dir. Returns the manifest path."""
    root = Path(root_dir)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(_MANIFEST_COLUMNS)]
    for trial in trials:
        names = {
            "eeg_file": f"{trial.trial_id}_eeg.clad",
            "env_a_file": f"{trial.trial_id}_enva.clad",
            "env_b_file": f"{trial.trial_id}_envb.clad",
        }
        write_array_file(root / names["eeg_file"], trial.eeg.data, trial.eeg.fs)
        write_array_file(root / names["env_a_file"], trial.env_a.samples, trial.env_a.fs)
        write_array_file(root / names["env_b_file"], trial.env_b.samples, trial.env_b.fs)
        lines.append(
            "\t".join(
                (
                    trial.trial_id,
                    trial.subject_id,
                    trial.condition,
                    str(trial.attended),
                    names["eeg_file"],
                    names["env_a_file"],
                    names["env_b_file"],
                )
            )
        )
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_dataset(root_dir):
    """Load every trial listed in root_dir/manifest.tsv."""
    root = Path(root_dir)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.tsv under {root}")
    trials = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith(_MANIFEST_COLUMNS[0] + "\t"):
            continue
        fields = line.split("\t")
        if len(fields) != len(_MANIFEST_COLUMNS):
            raise CorruptFileError(
                manifest, f"line {lineno}: expected {len(_MANIFEST_COLUMNS)} fields, got {len(fields)}"
            )
        trial_id, subject_id, condition, attended, eeg_file, enva_file, envb_file = fields
        if attended not in ("0", "1"):
            raise CorruptFileError(manifest, f"line {lineno}: attended must be 0 or 1, got {attended!r}")
        eeg_data, eeg_fs = read_array_file(root / eeg_file)
        enva_data, enva_fs = read_array_file(root / enva_file)
        envb_data, envb_fs = read_array_file(root / envb_file)
        for name, arr in (("env_a", enva_data), ("env_b", envb_data)):
            if arr.shape[0] != 1:
                raise CorruptFileError(root / (enva_file if name == "env_a" else envb_file),
                                       f"{name} must have one row, got {arr.shape[0]}")
        if not (eeg_fs == enva_fs == envb_fs):
            raise DataError(f"trial {trial_id}: sample rates disagree across files")
        trials.append(
            TrialRecording(
                trial_id=trial_id,
                eeg=MultiChannelRecording(eeg_data, eeg_fs),
                env_a=Waveform(enva_data[0], enva_fs),
                env_b=Waveform(envb_data[0], envb_fs),
                attended=int(attended),
                subject_id=subject_id,
                condition=condition,
            )
        )
    return trials


# ---------------------------------------------------------------------------
# Windowing


def make_windows(trial, csp, window_seconds, overlap=0.5):
    """Cut a trial into fixed-length decision windows.

    Window length is ``round(window_seconds * fs)`` and the hop is
    ``round(L * (1 - overlap))``; the trailing remainder is dropped. When
    ``csp`` is given, features are the CSP projection of the EEG slice,
    otherwise the raw EEG slice. A window longer than the trial yields an
    empty list.
    """
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    fs = trial.eeg.fs
    length = int(round(window_seconds * fs))
    if length < 1:
        raise ValueError(f"window of {window_seconds} s is empty at {fs} Hz")
    total = trial.n_samples
    if length > total:
        return []
    hop = int(round(length * (1.0 - overlap)))
    if hop < 1:
        raise ValueError(f"overlap {overlap} leaves no hop for {length}-sample windows")
    projected = csp_transform(csp, trial.eeg).data if csp is not None else trial.eeg.data
    count = (total - length) // hop + 1
    windows = []
    for w in range(count):
        start = w * hop
        stop = start + length
        windows.append(
            WindowedExample(
                features=projected[:, start:stop].copy(),
                env_a=trial.env_a.samples[start:stop].copy(),
                env_b=trial.env_b.samples[start:stop].copy(),
                label=trial.attended,
                subject_id=trial.subject_id,
                trial_id=trial.trial_id,
                window_index=w,
            )
        )
    return windows


# ---------------------------------------------------------------------------
# Splits


def _group_ids(examples):
    """Maps trial_id -> example-id set and subject_id -> trial_id set."""
    by_trial = {}
    by_subject = {}
    for ex in examples:
        by_trial.setdefault(ex.trial_id, set()).add(ex.example_id)
        by_subject.setdefault(ex.subject_id, set()).add(ex.trial_id)
    return by_trial, by_subject


def kfold_split(examples, k=5, seed=0):
    """Per-subject k-fold split grouped by trial, so no window of one trial
    ever lands on both sides of a fold."""
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    examples = list(examples)
    by_trial, by_subject = _group_ids(examples)
    rng = np.random.default_rng(seed)
    fold_trials = [set() for _ in range(k)]
    for subject in sorted(by_subject):
        trials = sorted(by_subject[subject])
        if len(trials) < k:
            raise ConfigError(
                f"subject {subject} has {len(trials)} trials, k={k} needs at least {k}"
            )
        order = rng.permutation(len(trials))
        for pos, idx in enumerate(order):
            fold_trials[pos % k].add(trials[idx])
    all_ids = frozenset(ex.example_id for ex in examples)
    folds = []
    for f in range(k):
        val = frozenset().union(*(by_trial[t] for t in fold_trials[f]))
        folds.append((all_ids - val, val))
    return SplitPlan(folds=tuple(folds), scheme="kfold_per_subject", seed=seed)


def loso_split(examples):
    """Leave-one-subject-out split, one fold per subject."""
    examples = list(examples)
    by_trial, by_subject = _group_ids(examples)
    if len(by_subject) < 2:
        raise ConfigError(f"leave-one-subject-out needs >= 2 subjects, got {len(by_subject)}")
    all_ids = frozenset(ex.example_id for ex in examples)
    folds = []
    for subject in sorted(by_subject):
        val = frozenset().union(*(by_trial[t] for t in by_subject[subject]))
        folds.append((all_ids - val, val))
    return SplitPlan(folds=tuple(folds), scheme="leave_one_subject_out", seed=0)


# ---------------------------------------------------------------------------
# Standardization and augmentation


def fit_standardizer(examples):
    """Per-channel feature mean/std and pooled envelope mean/std over a
    training split. Population statistics, zero stds promoted to 1."""
    examples = list(examples)
    if not examples:
        raise ValueError("cannot fit statistics on an empty split")
    feats = np.concatenate([ex.features for ex in examples], axis=1)
    envs = np.concatenate([np.concatenate([ex.env_a, ex.env_b]) for ex in examples])
    feat_mean = feats.mean(axis=1)
    feat_std = feats.std(axis=1)
    feat_std[feat_std == 0.0] = 1.0
    env_std = float(envs.std())
    return StandardizeStats(
        feature_mean=feat_mean,
        feature_std=feat_std,
        env_mean=float(envs.mean()),
        env_std=env_std if env_std > 0.0 else 1.0,
    )


def apply_standardizer(example, stats):
    """Z-score one example with training-split statistics."""
    return WindowedExample(
        features=(example.features - stats.feature_mean[:, None]) / stats.feature_std[:, None],
        env_a=(example.env_a - stats.env_mean) / stats.env_std,
        env_b=(example.env_b - stats.env_mean) / stats.env_std,
        label=example.label,
        subject_id=example.subject_id,
        trial_id=example.trial_id,
        window_index=example.window_index,
    )


def augment_gaussian(example, cfg, rng_seed):
    """Add elementwise N(0, noise_sigma^2) noise to features and envelopes.

    Pure given (example, rng_seed); the label is untouched.
    """
    rng = np.random.default_rng(rng_seed)
    sigma = cfg.noise_sigma
    return WindowedExample(
        features=example.features + sigma * rng.standard_normal(example.features.shape),
        env_a=example.env_a + sigma * rng.standard_normal(example.env_a.shape),
        env_b=example.env_b + sigma * rng.standard_normal(example.env_b.shape),
        label=example.label,
        subject_id=example.subject_id,
        trial_id=example.trial_id,
        window_index=example.window_index,
    )


# ---------------------------------------------------------------------------
# Synthetic cocktail-party generator

_CONDITIONS = ("anechoic", "mild_reverb", "high_reverb")
_SYNTH_FS = 64.0
_SYNTH_CHANNELS = 64
_ENV_BAND = FilterSpec(kind="bandpass", low_hz=1.0, high_hz=9.0, order=4)


def _pink_noise(rng, shape):
    """Unit-variance noise with a 1/f power spectrum along the last axis."""
    white = rng.standard_normal(shape)
    spectrum = np.fft.rfft(white, axis=-1)
    freq = np.fft.rfftfreq(shape[-1])
    gain = np.zeros_like(freq)
    gain[1:] = 1.0 / np.sqrt(freq[1:])
    pink = np.fft.irfft(spectrum * gain, n=shape[-1], axis=-1)
    return pink / pink.std(axis=-1, keepdims=True)


def _delay(x, lag):
    """Shift right by lag samples, padding with the first value."""
    return np.concatenate([np.full(lag, x[0]), x[:-lag]])


def _band_limited_envelope(rng, n):
    """A positive 1-9 Hz band-limited process at 64 Hz."""
    white = Waveform(rng.standard_normal(n), _SYNTH_FS)
    band = bandpass_filter(white, _ENV_BAND).samples
    return band - band.min()


def _as_stored(arr):
    """Round to the on-disk float32 grid so write/load round-trips exactly."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def synth_generate(cfg):
    """Generate labeled trials a linear decoder can solve.

    Each subject gets a fixed random 64-channel mixing column and a fixed
    envelope-to-EEG lag of 3 to 8 samples. EEG is the lagged attended
    envelope through that mixing plus pink noise scaled to cfg.snr_db.
    Labels are balanced within each subject.
    """
    rng = np.random.default_rng(cfg.seed)
    n = int(round(cfg.trial_seconds * _SYNTH_FS))
    trials = []
    for si in range(cfg.n_subjects):
        subject = f"S{si:02d}"
        mixing = rng.standard_normal(_SYNTH_CHANNELS)
        lag = int(rng.integers(3, 9))
        n_t = cfg.trials_per_subject
        labels = rng.permutation(np.repeat([0, 1], [n_t - n_t // 2, n_t // 2]))
        for tj in range(n_t):
            env_a = _band_limited_envelope(rng, n)
            env_b = _band_limited_envelope(rng, n)
            attended = int(labels[tj])
            source = _delay(env_a if attended == 0 else env_b, lag)
            signal = np.outer(mixing, source)
            noise = _pink_noise(rng, (_SYNTH_CHANNELS, n))
            sig_power = np.mean((signal - signal.mean(axis=1, keepdims=True)) ** 2)
            noise *= np.sqrt(sig_power / 10.0 ** (cfg.snr_db / 10.0))
            trials.append(
                TrialRecording(
                    trial_id=f"{subject}_T{tj:02d}",
                    eeg=MultiChannelRecording(_as_stored(signal + noise), _SYNTH_FS),
                    env_a=Waveform(_as_stored(env_a), _SYNTH_FS),
                    env_b=Waveform(_as_stored(env_b), _SYNTH_FS),
                    attended=attended,
                    subject_id=subject,
                    condition=_CONDITIONS[tj % len(_CONDITIONS)],
                )
            )
    return trials
