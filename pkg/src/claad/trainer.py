"""Back-to-back Adam training loop, evaluation, and checkpoint container.

Each step optimizes the contrastive objective first, then re-forwards the
same two augmented views under the updated parameters and optimizes the
classification objective through classifier and encoder. One Adam state
covers every parameter tensor and is stepped twice per batch.
"""

import math
import struct
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .csp import CspModel
from .dataset import (
    AugmentConfig,
    StandardizeStats,
    apply_standardizer,
    augment_gaussian,
    fit_standardizer,
)
from .errors import ConfigError, CorruptFileError, NumericalError
from .model import (
    ModelConfig,
    TwoViewBatch,
    classifier_batch,
    compute_gradients,
    encode_batch,
    init_parameters,
)

_EVAL_CHUNK = 64


@dataclass
class TrainConfig:
    """Optimizer and loop settings.

    lr = 0 is allowed as a degenerate optimizer for determinism checks.
    grad_clip is a global-norm ceiling applied before the moment updates;
    0 disables it.
    """

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    epochs: int = 40
    batch_size: int = 32
    eps_adam: float = 1e-8
    seed: int = 0
    noise_sigma: float = 1.0
    grad_clip: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {value}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eps_adam <= 0:
            raise ValueError(f"eps_adam must be > 0, got {self.eps_adam}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.grad_clip < 0:
            raise ValueError(f"grad_clip must be >= 0, got {self.grad_clip}")


@dataclass
class OptimizerState:
    """Adam moments aligned with the parameter store."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def initial(cls, params):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   t=0)


@dataclass
class Checkpoint:
    """Everything needed to reproduce evaluation: parameters, optimizer
    moments, the fitted spatial filters and standardization statistics of
    the run, both configs, and the per-epoch metric history."""

    params: dict
    opt_state: OptimizerState
    csp: CspModel = None
    stats: StandardizeStats = None
    model_cfg: ModelConfig = field(default_factory=ModelConfig)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    epoch: int = 0
    history: tuple = ()


# ---------------------------------------------------------------------------
# Optimizer


def adam_step(params, grads, state, cfg):
    """One Adam update; pure, returns new (params, state)."""
    if set(grads) != set(params):
        raise ValueError("gradient store keys do not match parameter store keys")
    for name in params:
        if not np.isfinite(grads[name]).all():
            raise NumericalError(name)
    scale = 1.0
    if cfg.grad_clip > 0.0:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
    t = state.t + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name] * scale
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        new_params[name] = p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)
        new_m[name] = m
        new_v[name] = v
    return new_params, OptimizerState(m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------------------
# Training steps


def _predictions(logits):
    # strict comparison breaks logit ties toward class 0
    return (logits[:, 1] > logits[:, 0]).astype(np.intp)


def train_step(batch, params, opt_state, cfg, model_cfg, loss_cfg=None):
    """Contrastive update, then classification update on the same views.

    Returns (params, opt_state, metrics) where metrics holds the
    contrastive loss, the per-example classification loss, and the batch
    accuracy of the post-contrastive-update classifier over both views.
    """
    claad_value, _, grads = compute_gradients(batch, params, model_cfg, "claad", loss_cfg)
    params, opt_state = adam_step(params, grads, opt_state, cfg)

    cls_value, views, grads = compute_gradients(
        batch, params, model_cfg, "classification", loss_cfg)
    params, opt_state = adam_step(params, grads, opt_state, cfg)

    labels = np.asarray(batch.labels)
    hits = np.sum(_predictions(views.logits1) == labels)
    hits += np.sum(_predictions(views.logits2) == labels)
    metrics = {
        "claad_loss": float(claad_value),
        "classification_loss": float(cls_value) / labels.size,
        "batch_accuracy": float(hits) / (2 * labels.size),
    }
    return params, opt_state, metrics


def _balanced_order(idx0, idx1, rng):
    perm0 = list(rng.permutation(idx0)) if idx0 else []
    perm1 = list(rng.permutation(idx1)) if idx1 else []
    order = []
    for a, b in zip(perm0, perm1):
        order.extend((int(a), int(b)))
    shorter = min(len(perm0), len(perm1))
    order.extend(int(i) for i in perm0[shorter:])
    order.extend(int(i) for i in perm1[shorter:])
    return order


def _two_view_batch(examples, indices, acfg, seed1, seed2):
    view1 = [augment_gaussian(examples[j], acfg, (seed1, j)) for j in indices]
    view2 = [augment_gaussian(examples[j], acfg, (seed2, j)) for j in indices]
    return TwoViewBatch(
        features1=np.stack([e.features for e in view1]),
        env_a1=np.stack([e.env_a for e in view1]),
        env_b1=np.stack([e.env_b for e in view1]),
        features2=np.stack([e.features for e in view2]),
        env_a2=np.stack([e.env_a for e in view2]),
        env_b2=np.stack([e.env_b for e in view2]),
        labels=np.array([examples[j].label for j in indices], dtype=np.intp),
    )


def _predict_clean(examples, params, model_cfg):
    """Single clean forward per example, chunked by window length."""
    preds = np.empty(len(examples), dtype=np.intp)
    by_length = {}
    for pos, ex in enumerate(examples):
        by_length.setdefault(ex.features.shape[1], []).append(pos)
    for positions in by_length.values():
        for start in range(0, len(positions), _EVAL_CHUNK):
            chunk = positions[start:start + _EVAL_CHUNK]
            features = np.stack([examples[pos].features for pos in chunk])
            env_a = np.stack([examples[pos].env_a for pos in chunk])
            env_b = np.stack([examples[pos].env_b for pos in chunk])
            z, _ = encode_batch(features, env_a, env_b, params, model_cfg)
            logits, _ = classifier_batch(z, params)
            preds[chunk] = _predictions(logits)
    return preds


def _clean_accuracy(examples, params, model_cfg):
    if not examples:
        return float("nan")
    labels = np.array([ex.label for ex in examples])
    return float(np.mean(_predict_clean(examples, params, model_cfg) == labels))


def fit(train_examples, val_examples, cfg, model_cfg=None, loss_cfg=None, csp_model=None):
    """Train on standardized copies of the examples; returns (Checkpoint, history).

    Statistics are fitted on the training split only and embedded in the
    checkpoint together with the (optional) spatial filter model, so that
    evaluation needs nothing beyond the checkpoint. Batches are shuffled
    with alternating labels each epoch; a partial trailing batch is
    dropped unless it is the only one.
    """
    train_examples = list(train_examples)
    val_examples = list(val_examples)
    if not train_examples:
        raise ConfigError("training set is empty")
    n_channels, length = train_examples[0].features.shape
    if model_cfg is None:
        model_cfg = ModelConfig(in_channels=n_channels, window_len=length)
    if n_channels != model_cfg.in_channels:
        raise ConfigError(
            f"examples have {n_channels} feature rows, model expects {model_cfg.in_channels}")

    stats = fit_standardizer(train_examples)
    train_std = [apply_standardizer(ex, stats) for ex in train_examples]
    val_std = [apply_standardizer(ex, stats) for ex in val_examples]

    params = init_parameters(model_cfg, seed=cfg.seed)
    opt_state = OptimizerState.initial(params)
    rng = np.random.default_rng((cfg.seed, 1))
    acfg = AugmentConfig(noise_sigma=cfg.noise_sigma)
    idx0 = [i for i, ex in enumerate(train_std) if ex.label == 0]
    idx1 = [i for i, ex in enumerate(train_std) if ex.label == 1]

    history = []
    for _ in range(cfg.epochs):
        order = _balanced_order(idx0, idx1, rng)
        starts = range(0, len(order) - cfg.batch_size + 1, cfg.batch_size)
        batches = [order[s:s + cfg.batch_size] for s in starts] or [order]
        sums = {"claad_loss": 0.0, "classification_loss": 0.0, "batch_accuracy": 0.0}
        for indices in batches:
            seed1 = int(rng.integers(0, 2 ** 31))
            seed2 = int(rng.integers(0, 2 ** 31))
            batch = _two_view_batch(train_std, indices, acfg, seed1, seed2)
            params, opt_state, metrics = train_step(
                batch, params, opt_state, cfg, model_cfg, loss_cfg)
            for key in sums:
                sums[key] += metrics[key]
        entry = {key: value / len(batches) for key, value in sums.items()}
        entry["val_accuracy"] = _clean_accuracy(val_std, params, model_cfg)
        history.append(entry)

    checkpoint = Checkpoint(params=params, opt_state=opt_state, csp=csp_model,
                            stats=stats, model_cfg=model_cfg, train_cfg=cfg,
                            epoch=cfg.epochs, history=tuple(history))
    return checkpoint, history


def evaluate_accuracy(examples, checkpoint):
    """Clean-input accuracy grouped by (subject_id, window length).

    Examples are standardized with the checkpoint's stored statistics.
    Returns {(subject_id, length): {"n_examples": int, "accuracy": float}}
    with only the groups that actually occur.
    """
    params = checkpoint.params
    model_cfg = checkpoint.model_cfg
    groups = {}
    for ex in examples:
        std = apply_standardizer(ex, checkpoint.stats) if checkpoint.stats else ex
        groups.setdefault((ex.subject_id, ex.features.shape[1]), []).append(std)
    table = {}
    for key in sorted(groups):
        members = groups[key]
        labels = np.array([ex.label for ex in members])
        preds = _predict_clean(members, params, model_cfg)
        table[key] = {"n_examples": len(members),
                      "accuracy": float(np.mean(preds == labels))}
    return table


# ---------------------------------------------------------------------------
# Checkpoint container

_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1
_HISTORY_KEYS = ("claad_loss", "classification_loss", "batch_accuracy", "val_accuracy")


def _write_tensor(fh, name, array):
    # order="C" both copies and keeps 0-d scalars 0-d (ascontiguousarray would not)
    data = np.asarray(array, dtype=np.float64).astype("<f4", order="C")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", data.ndim))
    if data.ndim:
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def _read_exact(fh, count, path, what):
    data = fh.read(count)
    if len(data) != count:
        raise CorruptFileError(path, f"truncated while reading {what}")
    return data


def _read_tensor(fh, path):
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "tensor name length"))
    name = _read_exact(fh, name_len, path, "tensor name").decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, path, "tensor rank"))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path, "tensor dims"))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, 4 * count, path, f"tensor {name} payload")
    array = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
    return name, array


def _config_lines(prefix, cfg):
    lines = []
    for key, value in vars(cfg).items():
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{prefix}.{key}={text}")
    return lines


def save_checkpoint(checkpoint, path):
    """Write the container: tensor records then a key=value metadata block."""
    tensors = []
    for name, value in checkpoint.params.items():
        tensors.append((f"param.{name}", value))
    for name, value in checkpoint.opt_state.m.items():
        tensors.append((f"adam.m.{name}", value))
    for name, value in checkpoint.opt_state.v.items():
        tensors.append((f"adam.v.{name}", value))
    tensors.append(("adam.t", np.float64(checkpoint.opt_state.t)))
    if checkpoint.csp is not None:
        tensors.append(("csp.filters", checkpoint.csp.filters))
        tensors.append(("csp.eigenvalues", checkpoint.csp.eigenvalues))
        tensors.append(("csp.cov0", checkpoint.csp.class_covariances[0]))
        tensors.append(("csp.cov1", checkpoint.csp.class_covariances[1]))
        tensors.append(("csp.shrinkage", np.float64(checkpoint.csp.shrinkage)))
    if checkpoint.stats is not None:
        tensors.append(("stats.feature_mean", checkpoint.stats.feature_mean))
        tensors.append(("stats.feature_std", checkpoint.stats.feature_std))
        tensors.append(("stats.env_mean", np.float64(checkpoint.stats.env_mean)))
        tensors.append(("stats.env_std", np.float64(checkpoint.stats.env_std)))

    lines = [f"format={_CKPT_VERSION}", f"epoch={checkpoint.epoch}"]
    lines += _config_lines("model", checkpoint.model_cfg)
    lines += _config_lines("train", checkpoint.train_cfg)
    lines.append(f"history.n={len(checkpoint.history)}")
    for i, entry in enumerate(checkpoint.history):
        for key in _HISTORY_KEYS:
            lines.append(f"history.{i}.{key}={entry[key]!r}")
    metadata = "\n".join(lines).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(tensors)))
        for name, value in tensors:
            _write_tensor(fh, name, value)
        fh.write(struct.pack("<I", len(metadata)))
        fh.write(metadata)


def _parse_meta(meta, prefix, cls, path):
    kwargs = {}
    for f in dc_fields(cls):
        key = f"{prefix}.{f.name}"
        if key not in meta:
            raise CorruptFileError(path, f"metadata missing {key}")
        raw = meta[key]
        if f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        elif f.type in ("tuple", tuple):
            kwargs[f.name] = tuple(int(v) for v in raw.split(",") if v)
        else:
            raise CorruptFileError(path, f"unsupported config field {key}")
    return cls(**kwargs)


def load_checkpoint(path):
    """Read a container written by save_checkpoint; values land on the
    float32 grid, so a further save round-trips bit-exactly."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path, "magic") != _CKPT_MAGIC:
            raise CorruptFileError(path, "bad magic")
        version, n_tensors = struct.unpack("<II", _read_exact(fh, 8, path, "header"))
        if version != _CKPT_VERSION:
            raise CorruptFileError(path, f"unsupported format version {version}")
        tensors = dict(_read_tensor(fh, path) for _ in range(n_tensors))
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "metadata length"))
        text = _read_exact(fh, meta_len, path, "metadata").decode("utf-8")
        if fh.read(1):
            raise CorruptFileError(path, "trailing bytes after metadata")

    meta = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value

    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    opt_state = OptimizerState(
        m={k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")},
        v={k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")},
        t=int(tensors["adam.t"]),
    )
    csp = None
    if "csp.filters" in tensors:
        csp = CspModel(filters=tensors["csp.filters"],
                       eigenvalues=tensors["csp.eigenvalues"],
                       class_covariances=(tensors["csp.cov0"], tensors["csp.cov1"]),
                       shrinkage=float(tensors["csp.shrinkage"]))
    stats = None
    if "stats.feature_mean" in tensors:
        stats = StandardizeStats(feature_mean=tensors["stats.feature_mean"],
                                 feature_std=tensors["stats.feature_std"],
                                 env_mean=float(tensors["stats.env_mean"]),
                                 env_std=float(tensors["stats.env_std"]))

    model_cfg = _parse_meta(meta, "model", ModelConfig, path)
    train_cfg = _parse_meta(meta, "train", TrainConfig, path)
    n_history = int(meta.get("history.n", "0"))
    history = tuple(
        {key: float(meta[f"history.{i}.{key}"]) for key in _HISTORY_KEYS}
        for i in range(n_history)
    )
    return Checkpoint(params=params, opt_state=opt_state, csp=csp, stats=stats,
                      model_cfg=model_cfg, train_cfg=train_cfg,
                      epoch=int(meta["epoch"]), history=history)
