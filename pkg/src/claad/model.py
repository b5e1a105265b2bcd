"""Cross-modal attention encoder, probe head, and classifier head.

The encoder runs two pairings, (EEG, envelope A) and (EEG, envelope B),
through a shared stack of cross-attention blocks in which the EEG-side
stream is the query and the projected envelope provides keys and values.
Every block rewrites the EEG-side stream; the audio-side input stays the
original projected envelope. Both pairings are mean-pooled over time,
concatenated, and fused down to the representation z.

Parameters live in a flat name-to-array store so they serialize directly
into checkpoint records, and gradients are hand-written (see ops) so they
can be validated against finite differences.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .losses import LossConfig, claad_loss_grad, classification_loss_grad
from .ops import (
    layer_norm_bwd,
    layer_norm_fwd,
    linear_bwd,
    linear_fwd,
    mha_bwd,
    mha_fwd,
    relu_bwd,
    relu_fwd,
    softmax,
    softmax_bwd,
)

_ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
BLOCK_KEYS = (
    "ln1.g", "ln1.b", "ln2.g", "ln2.b",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk",
    "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "fc1.w", "fc1.b", "fc2.w", "fc2.b",
)


@dataclass
class ModelConfig:
    d_model: int = 320
    n_heads: int = 8
    n_blocks: int = 5
    d_repr: int = 50
    probe_hidden: int = 25
    clf_dims: tuple = (100, 50, 2)
    window_len: int = 128
    in_channels: int = 64

    def __post_init__(self):
        self.clf_dims = tuple(int(d) for d in self.clf_dims)
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for the positional encoding")
        if self.clf_dims[-1] != 2:
            raise ValueError(f"classifier must end in 2 logits, got {self.clf_dims}")
        for name in ("d_model", "n_heads", "n_blocks", "d_repr", "probe_hidden",
                     "window_len", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class TwoViewBatch:
    """Two augmented views of one clean batch, plus the shared labels."""

    features1: np.ndarray
    env_a1: np.ndarray
    env_b1: np.ndarray
    features2: np.ndarray
    env_a2: np.ndarray
    env_b2: np.ndarray
    labels: np.ndarray


@dataclass
class BatchViews:
    """Forward results of both views: representations, probe outputs, logits."""

    z1: np.ndarray
    z2: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    logits1: np.ndarray
    logits2: np.ndarray


def positional_encoding(length, d):
    """Sinusoidal code: PE[t, 2i] = sin(t / 10000^(2i/d)), odd columns cos."""
    if d % 2 != 0:
        raise ValueError(f"embedding dimension must be even, got {d}")
    t = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = t / np.power(10000.0, 2.0 * i / d)
    pe = np.empty((length, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def _glorot(rng, fan_in, fan_out, shape):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_parameters(cfg, seed=0):
    """Fresh parameter store: uniform Glorot weights, zero biases,
    unit layer-norm gains. Deterministic in (cfg, seed)."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    params = {}

    def w(name, fan_in, fan_out, shape=None):
        params[name] = _glorot(rng, fan_in, fan_out, shape or (fan_in, fan_out))

    def b(name, n):
        params[name] = np.zeros(n)

    w("eeg_proj.w", cfg.in_channels, d)
    b("eeg_proj.b", d)
    w("audio_proj.w", 1, d)
    b("audio_proj.b", d)
    for i in range(cfg.n_blocks):
        pre = f"block{i}."
        params[pre + "ln1.g"] = np.ones(d)
        b(pre + "ln1.b", d)
        params[pre + "ln2.g"] = np.ones(d)
        b(pre + "ln2.b", d)
        for key in ("wq", "wk", "wv", "wo"):
            w(pre + "attn." + key, d, d)
            b(pre + "attn.b" + key[1], d)
        w(pre + "fc1.w", d, d)
        b(pre + "fc1.b", d)
        w(pre + "fc2.w", d, d)
        b(pre + "fc2.b", d)
    w("fusion.w", 2 * d, cfg.d_repr)
    b("fusion.b", cfg.d_repr)
    w("probe.fc1.w", cfg.d_repr, cfg.probe_hidden)
    b("probe.fc1.b", cfg.probe_hidden)
    w("probe.fc2.w", cfg.probe_hidden, cfg.d_repr)
    b("probe.fc2.b", cfg.d_repr)
    dims = (cfg.d_repr,) + cfg.clf_dims
    for i in range(len(cfg.clf_dims)):
        w(f"clf.fc{i + 1}.w", dims[i], dims[i + 1])
        b(f"clf.fc{i + 1}.b", dims[i + 1])
    return params


def _block_view(params, i):
    pre = f"block{i}."
    return {key: params[pre + key] for key in BLOCK_KEYS}


def _attn_view(bp):
    return {key: bp["attn." + key] for key in _ATTN_KEYS}


def _block_fwd(stream, tok_audio, bp, n_heads, pe):
    """One cross-attention block over [B, L, d] streams."""
    a, c_ln_e = layer_norm_fwd(stream, bp["ln1.g"], bp["ln1.b"])
    bnorm, c_ln_a = layer_norm_fwd(tok_audio, bp["ln1.g"], bp["ln1.b"])
    m, c_mha = mha_fwd(a, bnorm, bnorm, _attn_view(bp), n_heads)
    r1 = m + stream
    n2, c_ln2 = layer_norm_fwd(r1, bp["ln2.g"], bp["ln2.b"])
    f, c_fc1 = linear_fwd(n2, bp["fc1.w"], bp["fc1.b"])
    r2 = f + n2
    out, c_fc2 = linear_fwd(r2, bp["fc2.w"], bp["fc2.b"])
    return out + pe, (c_ln_e, c_ln_a, c_mha, c_ln2, c_fc1, c_fc2)


def _block_bwd(dstream_out, cache, grads, pre):
    """Backward through one block. Returns (dstream_in, dtok_audio)."""
    c_ln_e, c_ln_a, c_mha, c_ln2, c_fc1, c_fc2 = cache
    dr2, dw2, db2 = linear_bwd(dstream_out, c_fc2)
    grads[pre + "fc2.w"] += dw2
    grads[pre + "fc2.b"] += db2
    dn2, dw1, db1 = linear_bwd(dr2, c_fc1)
    grads[pre + "fc1.w"] += dw1
    grads[pre + "fc1.b"] += db1
    dn2 = dn2 + dr2
    dr1, dg2, db2g = layer_norm_bwd(dn2, c_ln2)
    grads[pre + "ln2.g"] += dg2
    grads[pre + "ln2.b"] += db2g
    dq, dk, dv, attn_grads = mha_bwd(dr1, c_mha)
    for key in _ATTN_KEYS:
        grads[pre + "attn." + key] += attn_grads[key]
    dstream_in, dg1e, db1e = layer_norm_bwd(dq, c_ln_e)
    dtok_audio, dg1a, db1a = layer_norm_bwd(dk + dv, c_ln_a)
    grads[pre + "ln1.g"] += dg1e + dg1a
    grads[pre + "ln1.b"] += db1e + db1a
    return dstream_in + dr1, dtok_audio


def _pairing_fwd(tok_eeg, tok_audio, params, cfg, pe):
    stream = tok_eeg
    caches = []
    for i in range(cfg.n_blocks):
        stream, cache = _block_fwd(stream, tok_audio, _block_view(params, i), cfg.n_heads, pe)
        caches.append(cache)
    return stream.mean(axis=1), caches


def _pairing_bwd(dpooled, caches, cfg, grads, length):
    dstream = np.broadcast_to(dpooled[:, None, :] / length,
                              (dpooled.shape[0], length, dpooled.shape[1])).copy()
    dtok_audio = np.zeros_like(dstream)
    for i in reversed(range(cfg.n_blocks)):
        dstream, daudio = _block_bwd(dstream, caches[i], grads, f"block{i}.")
        dtok_audio += daudio
    return dstream, dtok_audio


def encode_batch(features, env_a, env_b, params, cfg):
    """Encode a batch. features [B, C, L], envelopes [B, L] -> z [B, d_repr]."""
    features = np.asarray(features, dtype=np.float64)
    env_a = np.asarray(env_a, dtype=np.float64)
    env_b = np.asarray(env_b, dtype=np.float64)
    if features.ndim != 3 or features.shape[1] != cfg.in_channels or features.shape[2] < 1:
        raise ValueError(
            f"features must be [B x {cfg.in_channels} x L], got {features.shape}")
    b, _, length = features.shape
    if env_a.shape != (b, length) or env_b.shape != (b, length):
        raise ValueError("envelope shapes must be [B x L] matching the features")
    tok_in = features.transpose(0, 2, 1)
    tok_eeg, c_eeg = linear_fwd(tok_in, params["eeg_proj.w"], params["eeg_proj.b"])
    # Rows are independent throughout the blocks, so both pairings ride one
    # stacked [2B, L, d] pass: (eeg, env_a) rows first, (eeg, env_b) rows last.
    env_ab = np.concatenate([env_a, env_b], axis=0)
    tok_audio, c_audio = linear_fwd(env_ab[..., None],
                                    params["audio_proj.w"], params["audio_proj.b"])
    pe = positional_encoding(length, cfg.d_model)
    u, caches = _pairing_fwd(np.concatenate([tok_eeg, tok_eeg], axis=0),
                             tok_audio, params, cfg, pe)
    concat = np.concatenate([u[:b], u[b:]], axis=1)
    z, c_fus = linear_fwd(concat, params["fusion.w"], params["fusion.b"])
    cache = (c_eeg, c_audio, caches, c_fus, length, b)
    return z, cache


def encode_bwd(dz, cache, params, cfg, grads):
    c_eeg, c_audio, caches, c_fus, length, b = cache
    dconcat, dwf, dbf = linear_bwd(dz, c_fus)
    grads["fusion.w"] += dwf
    grads["fusion.b"] += dbf
    d = cfg.d_model
    dpooled = np.concatenate([dconcat[:, :d], dconcat[:, d:]], axis=0)
    dtok_eeg2, dtok_audio = _pairing_bwd(dpooled, caches, cfg, grads, length)
    _, dwe, dbe = linear_bwd(dtok_eeg2[:b] + dtok_eeg2[b:], c_eeg)
    grads["eeg_proj.w"] += dwe
    grads["eeg_proj.b"] += dbe
    _, dwa, dba = linear_bwd(dtok_audio, c_audio)
    grads["audio_proj.w"] += dwa
    grads["audio_proj.b"] += dba


def probe_batch(z, params):
    h, c1 = linear_fwd(z, params["probe.fc1.w"], params["probe.fc1.b"])
    hr, cr = relu_fwd(h)
    p, c2 = linear_fwd(hr, params["probe.fc2.w"], params["probe.fc2.b"])
    return p, (c1, cr, c2)


def probe_bwd(dp, cache, grads):
    c1, cr, c2 = cache
    dhr, dw2, db2 = linear_bwd(dp, c2)
    grads["probe.fc2.w"] += dw2
    grads["probe.fc2.b"] += db2
    dh = relu_bwd(dhr, cr)
    dz, dw1, db1 = linear_bwd(dh, c1)
    grads["probe.fc1.w"] += dw1
    grads["probe.fc1.b"] += db1
    return dz


def _n_clf_layers(params):
    n = 0
    while f"clf.fc{n + 1}.w" in params:
        n += 1
    return n


def classifier_batch(z, params):
    n = _n_clf_layers(params)
    x = z
    caches = []
    for i in range(1, n + 1):
        x, c_lin = linear_fwd(x, params[f"clf.fc{i}.w"], params[f"clf.fc{i}.b"])
        if i < n:
            x, c_relu = relu_fwd(x)
        else:
            c_relu = None
        caches.append((c_lin, c_relu))
    return x, caches


def classifier_bwd(dlogits, caches, grads):
    dx = dlogits
    for i in range(len(caches), 0, -1):
        c_lin, c_relu = caches[i - 1]
        if c_relu is not None:
            dx = relu_bwd(dx, c_relu)
        dx, dw, db = linear_bwd(dx, c_lin)
        grads[f"clf.fc{i}.w"] += dw
        grads[f"clf.fc{i}.b"] += db
    return dx


# ---------------------------------------------------------------------------
# Public single-example operations


def multi_head_attention(q, k, v, params, n_heads):
    """Attention over single [L x d] inputs; params holds wq/bq..wo/bo."""
    out, _ = mha_fwd(q[None], k[None], v[None], params, n_heads)
    return out[0]


def cross_attention_block(eeg_stream, audio_stream, block_params, n_heads):
    """One block over [L x d] streams; returns the next EEG-side stream."""
    if eeg_stream.shape != audio_stream.shape:
        raise ValueError("both streams must share [L x d]")
    pe = positional_encoding(eeg_stream.shape[0], eeg_stream.shape[1])
    out, _ = _block_fwd(eeg_stream[None], audio_stream[None], block_params, n_heads, pe)
    return out[0]


def cmaa_encode(features, env_a, env_b, params, cfg):
    """Encode one example: [C x L] features and two [L] envelopes -> z [d_repr]."""
    z, _ = encode_batch(features[None], env_a[None], env_b[None], params, cfg)
    return z[0]


def probe_forward(z, params):
    p, _ = probe_batch(np.asarray(z, dtype=np.float64)[None], params)
    return p[0]


def classifier_forward(z, params):
    logits, _ = classifier_batch(np.asarray(z, dtype=np.float64)[None], params)
    return logits[0]


# ---------------------------------------------------------------------------
# Full forward and gradients


def forward_view(features, env_a, env_b, params, cfg):
    """One view through encoder, probe, and classifier, keeping caches."""
    z, enc_cache = encode_batch(features, env_a, env_b, params, cfg)
    p, probe_cache = probe_batch(z, params)
    logits, clf_cache = classifier_batch(z, params)
    return z, p, logits, (enc_cache, probe_cache, clf_cache)


def forward_views(batch, params, cfg):
    """Both augmented views under the shared parameter store."""
    z1, p1, logits1, cache1 = forward_view(batch.features1, batch.env_a1, batch.env_b1, params, cfg)
    z2, p2, logits2, cache2 = forward_view(batch.features2, batch.env_a2, batch.env_b2, params, cfg)
    views = BatchViews(z1=z1, z2=z2, p1=p1, p2=p2, logits1=logits1, logits2=logits2)
    return views, cache1, cache2


def _check_finite(views):
    for name in ("z1", "z2", "p1", "p2", "logits1", "logits2"):
        if not np.isfinite(getattr(views, name)).all():
            raise NumericalError(name)


def compute_gradients(batch, params, cfg, loss_selector, loss_cfg=None):
    """Loss and parameter gradients for one selector.

    'claad' backpropagates the symmetric contrastive loss through probe
    and encoder with the z targets held constant, leaving the classifier
    untouched; 'classification' backpropagates the view-averaged cross
    entropy through classifier and encoder, leaving the probe untouched.
    Returns (loss, BatchViews, gradient store aligned with params).
    """
    if loss_selector not in ("claad", "classification"):
        raise ValueError(f"unknown loss selector {loss_selector!r}")
    loss_cfg = loss_cfg or LossConfig()
    views, cache1, cache2 = forward_views(batch, params, cfg)
    _check_finite(views)
    grads = {name: np.zeros_like(value) for name, value in params.items()}
    labels = np.asarray(batch.labels, dtype=np.intp)

    if loss_selector == "claad":
        loss, dp1, dp2 = claad_loss_grad(views.p1, views.z2, views.p2, views.z1,
                                         labels, loss_cfg)
        for dp, cache in ((dp1, cache1), (dp2, cache2)):
            enc_cache, probe_cache, _ = cache
            dz = probe_bwd(dp, probe_cache, grads)
            encode_bwd(dz, enc_cache, params, cfg, grads)
    else:
        probs1 = softmax(views.logits1)
        probs2 = softmax(views.logits2)
        loss1, dprobs1 = classification_loss_grad(probs1, labels, loss_cfg.epsilon)
        loss2, dprobs2 = classification_loss_grad(probs2, labels, loss_cfg.epsilon)
        loss = 0.5 * (loss1 + loss2)
        for probs, dprobs, cache in ((probs1, dprobs1, cache1), (probs2, dprobs2, cache2)):
            enc_cache, _, clf_cache = cache
            dlogits = softmax_bwd(0.5 * dprobs, probs)
            dz = classifier_bwd(dlogits, clf_cache, grads)
            encode_bwd(dz, enc_cache, params, cfg, grads)

    if not np.isfinite(loss):
        raise NumericalError("loss", f"{loss_selector} loss is non-finite")
    return loss, views, grads
