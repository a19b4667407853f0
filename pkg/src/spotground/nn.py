"""Dense numerical kernel: encoder heads with hand-written backprop.

Everything here runs in float64 on plain numpy arrays. The encoder is the
classic post-norm arrangement: input projection (scaled by sqrt(model_dim)
before the positional encoding is added, per the original encoder recipe,
so low-magnitude embedding rows are not drowned by the encoding), optional
learned segment offsets, sinusoidal positional encoding, N x (multi-head
self-attention + residual + layer-norm, ReLU feed-forward + residual +
layer-norm), mean pooling over time, final linear projection. The backward
pass is exact and is verified against central finite differences by
grad_check.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConsistencyError, NumericError, ShapeError

LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    output_dim: int
    model_dim: int = 64
    num_layers: int = 3
    num_heads: int = 4
    hidden_dim: int = 256
    dropout_p: float = 0.1
    num_segments: int = 0  # 2 for the grounding head, 0 otherwise

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ShapeError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ShapeError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if min(self.input_dim, self.output_dim, self.model_dim, self.hidden_dim) < 1:
            raise ShapeError("all dimensions must be positive")
        if self.num_layers < 1:
            raise ShapeError("need at least one encoder layer")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "model_dim": self.model_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "hidden_dim": self.hidden_dim,
            "dropout_p": self.dropout_p,
            "num_segments": self.num_segments,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(**d)


def positional_encoding(T: int, d: int) -> np.ndarray:
    """Sinusoidal table: PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(...)."""
    if d % 2 != 0:
        raise ShapeError(f"positional encoding dimension must be even, got {d}")
    if T < 1:
        raise ShapeError(f"need T >= 1, got {T}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    even = np.arange(0, d, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, even / d)
    pe = np.empty((T, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    dm, dh, dout = config.model_dim, config.hidden_dim, config.output_dim
    p: dict[str, np.ndarray] = {}
    p["in.w"] = _glorot(rng, config.input_dim, dm)
    p["in.b"] = np.zeros(dm)
    if config.num_segments:
        p["seg.emb"] = rng.normal(0.0, 0.02, size=(config.num_segments, dm))
    for i in range(config.num_layers):
        pre = f"layer{i}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + name] = _glorot(rng, dm, dm)
        # no key bias: a shared shift on the keys cancels inside the row
        # softmax, leaving a provably inert parameter
        for name in ("bq", "bv", "bo"):
            p[pre + "attn." + name] = np.zeros(dm)
        p[pre + "ln1.g"] = np.ones(dm)
        p[pre + "ln1.b"] = np.zeros(dm)
        p[pre + "ffn.w1"] = _glorot(rng, dm, dh)
        p[pre + "ffn.b1"] = np.zeros(dh)
        p[pre + "ffn.w2"] = _glorot(rng, dh, dm)
        p[pre + "ffn.b2"] = np.zeros(dm)
        p[pre + "ln2.g"] = np.ones(dm)
        p[pre + "ln2.b"] = np.zeros(dm)
    p["out.w"] = _glorot(rng, dm, dout)
    p["out.b"] = np.zeros(dout)
    return p


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values after {where}")


def _dropout_mask(rng, shape, p):
    return (rng.random(shape) >= p).astype(np.float64) / (1.0 - p)


def _layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return xhat * g + b, xhat, inv_std


def _layernorm_backward(dy, xhat, inv_std, g):
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def _split_heads(x, num_heads):
    B, T, dm = x.shape
    dk = dm // num_heads
    return x.reshape(B, T, num_heads, dk).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dk)


def encoder_forward_batch(
    params: dict[str, np.ndarray],
    config: EncoderConfig,
    x: np.ndarray,
    segments: np.ndarray | None = None,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
):
    """Run the encoder on a batch. Returns (logits (B, out), cache for backward)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected (B, T, input_dim), got shape {x.shape}")
    B, T, din = x.shape
    if din != config.input_dim:
        raise ShapeError(f"input dim {din} != configured {config.input_dim}")
    if config.num_segments and segments is None:
        raise ShapeError("this encoder requires a segments array")
    dropping = train_mode and config.dropout_p > 0.0
    if dropping and rng is None:
        raise ShapeError("train-mode forward with dropout needs an rng")

    cache: dict = {
        "params": params,
        "config": config,
        "x": x,
        "segments": segments,
        "train_mode": train_mode,
    }

    embed_scale = np.sqrt(config.model_dim)
    cache["embed_scale"] = embed_scale
    h = (x @ params["in.w"] + params["in.b"]) * embed_scale
    if config.num_segments:
        seg = np.asarray(segments, dtype=np.int64)
        if seg.shape != (B, T) and seg.shape != (T,):
            raise ShapeError(f"segments shape {seg.shape} does not match ({B}, {T})")
        if seg.ndim == 1:
            seg = np.broadcast_to(seg, (B, T))
        cache["segments"] = seg
        h = h + params["seg.emb"][seg]
    h = h + positional_encoding(T, config.model_dim)
    if dropping:
        mask0 = _dropout_mask(rng, h.shape, config.dropout_p)
        h = h * mask0
        cache["drop0"] = mask0
    _check_finite(h, "input projection")

    scale = 1.0 / np.sqrt(config.model_dim // config.num_heads)
    layers = []
    for i in range(config.num_layers):
        pre = f"layer{i}."
        rec: dict = {"x": h}
        q = h @ params[pre + "attn.wq"] + params[pre + "attn.bq"]
        k = h @ params[pre + "attn.wk"]
        v = h @ params[pre + "attn.wv"] + params[pre + "attn.bv"]
        rec["q"], rec["k"], rec["v"] = q, k, v
        qh, kh, vh = (_split_heads(t, config.num_heads) for t in (q, k, v))
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        attn = softmax(scores, axis=-1)
        rec["attn"] = attn
        o = _merge_heads(attn @ vh)
        rec["o"] = o
        y = o @ params[pre + "attn.wo"] + params[pre + "attn.bo"]
        if dropping:
            rec["attn_drop"] = _dropout_mask(rng, y.shape, config.dropout_p)
            y = y * rec["attn_drop"]
        h1, xhat1, inv1 = _layernorm_forward(h + y, params[pre + "ln1.g"], params[pre + "ln1.b"])
        rec["ln1"] = (xhat1, inv1)
        rec["h1"] = h1

        f_pre = h1 @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"]
        f1 = np.maximum(f_pre, 0.0)
        rec["f_pre"], rec["f1"] = f_pre, f1
        f2 = f1 @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]
        if dropping:
            rec["ffn_drop"] = _dropout_mask(rng, f2.shape, config.dropout_p)
            f2 = f2 * rec["ffn_drop"]
        h, xhat2, inv2 = _layernorm_forward(h1 + f2, params[pre + "ln2.g"], params[pre + "ln2.b"])
        rec["ln2"] = (xhat2, inv2)
        _check_finite(h, f"encoder layer {i}")
        layers.append(rec)
    cache["layers"] = layers

    pooled = h.mean(axis=1)
    cache["pooled"] = pooled
    logits = pooled @ params["out.w"] + params["out.b"]
    _check_finite(logits, "output projection")
    cache["logits_shape"] = logits.shape
    return logits, cache


def encoder_forward(
    params,
    config: EncoderConfig,
    x: np.ndarray,
    segments: np.ndarray | None = None,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
):
    """Single-chunk forward: x is (T, input_dim), returns (logits (out,), cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected (T, input_dim), got shape {x.shape}")
    seg = None if segments is None else np.asarray(segments)[None, :]
    logits, cache = encoder_forward_batch(
        params, config, x[None], segments=seg, train_mode=train_mode, rng=rng
    )
    return logits[0], cache


def encoder_backward(cache: dict, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate d loss / d logits through the cached forward pass."""
    params, config = cache.get("params"), cache.get("config")
    if params is None or "layers" not in cache:
        raise ConsistencyError("cache does not come from encoder_forward")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache["logits_shape"]:
        if upstream.shape == cache["logits_shape"][1:]:
            upstream = upstream[None]
        else:
            raise ConsistencyError(
                f"upstream gradient shape {upstream.shape} does not match "
                f"forward output {cache['logits_shape']}"
            )
    B, T, _ = cache["x"].shape
    grads: dict[str, np.ndarray] = {}

    pooled = cache["pooled"]
    grads["out.w"] = pooled.T @ upstream
    grads["out.b"] = upstream.sum(axis=0)
    dpooled = upstream @ params["out.w"].T
    dh = np.repeat(dpooled[:, None, :], T, axis=1) / T

    scale = 1.0 / np.sqrt(config.model_dim // config.num_heads)
    for i in reversed(range(config.num_layers)):
        pre = f"layer{i}."
        rec = cache["layers"][i]
        xhat2, inv2 = rec["ln2"]
        dr2, dg2, db2 = _layernorm_backward(dh, xhat2, inv2, params[pre + "ln2.g"])
        grads[pre + "ln2.g"], grads[pre + "ln2.b"] = dg2, db2

        df2 = dr2 * rec["ffn_drop"] if "ffn_drop" in rec else dr2
        dh1 = dr2.copy()
        grads[pre + "ffn.w2"] = np.einsum("bth,btd->hd", rec["f1"], df2)
        grads[pre + "ffn.b2"] = df2.sum(axis=(0, 1))
        df1 = df2 @ params[pre + "ffn.w2"].T
        dfpre = df1 * (rec["f_pre"] > 0.0)
        grads[pre + "ffn.w1"] = np.einsum("btd,bth->dh", rec["h1"], dfpre)
        grads[pre + "ffn.b1"] = dfpre.sum(axis=(0, 1))
        dh1 += dfpre @ params[pre + "ffn.w1"].T

        xhat1, inv1 = rec["ln1"]
        dr1, dg1, db1 = _layernorm_backward(dh1, xhat1, inv1, params[pre + "ln1.g"])
        grads[pre + "ln1.g"], grads[pre + "ln1.b"] = dg1, db1

        dy = dr1 * rec["attn_drop"] if "attn_drop" in rec else dr1
        dx = dr1.copy()
        grads[pre + "attn.wo"] = np.einsum("btm,btn->mn", rec["o"], dy)
        grads[pre + "attn.bo"] = dy.sum(axis=(0, 1))
        do = dy @ params[pre + "attn.wo"].T

        H = config.num_heads
        doh = _split_heads(do, H)
        qh, kh, vh = (_split_heads(rec[n], H) for n in ("q", "k", "v"))
        attn = rec["attn"]
        dattn = doh @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ doh
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dqh = (dscores @ kh) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
        dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))

        x_l = rec["x"]
        for name, dt in (("q", dq), ("k", dk), ("v", dv)):
            grads[pre + f"attn.w{name}"] = np.einsum("btd,bte->de", x_l, dt)
            if name != "k":
                grads[pre + f"attn.b{name}"] = dt.sum(axis=(0, 1))
        dx += (
            dq @ params[pre + "attn.wq"].T
            + dk @ params[pre + "attn.wk"].T
            + dv @ params[pre + "attn.wv"].T
        )
        dh = dx

    if "drop0" in cache:
        dh = dh * cache["drop0"]
    if config.num_segments:
        seg = cache["segments"]
        demb = np.zeros_like(params["seg.emb"])
        for k in range(config.num_segments):
            demb[k] = dh[seg == k].sum(axis=0)
        grads["seg.emb"] = demb
    dproj = dh * cache["embed_scale"]
    grads["in.w"] = np.einsum("bti,btm->im", cache["x"], dproj)
    grads["in.b"] = dproj.sum(axis=(0, 1))
    return grads


# ---------------------------------------------------------------------------
# losses


def cross_entropy_soft(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy against target distributions. Returns (loss, dlogits)."""
    logits = np.atleast_2d(logits)
    targets = np.atleast_2d(targets)
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    B = logits.shape[0]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -(targets * log_probs).sum() / B
    dlogits = (np.exp(log_probs) - targets) / B
    return loss, dlogits


PROB_CLAMP = 1e-7


def bce_plus_l2(
    outputs: np.ndarray,
    labels: np.ndarray,
    offset_targets: np.ndarray,
    offset_weight: float = 1.0,
):
    """Grounding loss: BCE on sigmoid(outputs[:, 0]) plus weighted squared
    offset error on outputs[:, 1], the latter only for positive samples.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log; inside
    the clamp region the gradient is zero, matching the clamped loss.
    Returns (mean loss, d loss / d outputs).
    """
    outputs = np.atleast_2d(outputs)
    if outputs.shape[1] != 2:
        raise ShapeError(f"grounding outputs must have 2 columns, got {outputs.shape}")
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    offset_targets = np.asarray(offset_targets, dtype=np.float64).reshape(-1)
    B = outputs.shape[0]
    z, off = outputs[:, 0], outputs[:, 1]
    prob = 1.0 / (1.0 + np.exp(-z))
    clamped = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce = -(labels * np.log(clamped) + (1.0 - labels) * np.log(1.0 - clamped))
    off_err = off - offset_targets
    l2 = offset_weight * labels * off_err**2
    loss = (bce + l2).sum() / B

    inside = (prob > PROB_CLAMP) & (prob < 1.0 - PROB_CLAMP)
    dout = np.zeros_like(outputs)
    dout[:, 0] = np.where(inside, prob - labels, 0.0) / B
    dout[:, 1] = 2.0 * offset_weight * labels * off_err / B
    return loss, dout


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @staticmethod
    def for_params(params: dict[str, np.ndarray]) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected adaptive-moment update, in place."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in sorted(params):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(
    params: dict[str, np.ndarray],
    loss_fn,
    trials: int = 100,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients with central finite differences.

    loss_fn(params, want_grads) must return (loss, grads-or-None) and be a
    pure function of params. Probes `trials` uniformly random coordinates
    and returns the maximum relative error |a - n| / max(|a|, |n|, 1e-12).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    _, grads = loss_fn(params, True)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])

    max_err = 0.0
    for _ in range(trials):
        flat = int(rng.integers(0, total))
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        idx = flat - int(offsets[which])
        arr = params[name]
        orig = arr.flat[idx]
        arr.flat[idx] = orig + h
        loss_plus, _ = loss_fn(params, False)
        arr.flat[idx] = orig - h
        loss_minus, _ = loss_fn(params, False)
        arr.flat[idx] = orig
        numeric = (loss_plus - loss_minus) / (2.0 * h)
        analytic = grads[name].flat[idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        max_err = max(max_err, err)
    return max_err


SPOT_GRADCHECK_CONFIG = EncoderConfig(
    input_dim=16, output_dim=18, model_dim=64, num_layers=3, num_heads=4,
    hidden_dim=256, dropout_p=0.0,
)
GROUND_GRADCHECK_CONFIG = EncoderConfig(
    input_dim=16, output_dim=2, model_dim=64, num_layers=4, num_heads=4,
    hidden_dim=256, dropout_p=0.0, num_segments=2,
)


def spotting_grad_check(
    config: EncoderConfig | None = None,
    trials: int = 100,
    h: float = 1e-5,
    seed: int = 0,
    batch: int = 2,
    T: int = 7,
) -> float:
    """Finite-difference check of the spotting head under cross-entropy."""
    config = config or SPOT_GRADCHECK_CONFIG
    if config.dropout_p:
        config = replace(config, dropout_p=0.0)
    rng = np.random.default_rng(seed)
    params = init_encoder_params(config, rng)
    x = rng.normal(size=(batch, T, config.input_dim))
    targets = np.zeros((batch, config.output_dim))
    targets[np.arange(batch), rng.integers(0, config.output_dim, batch)] = 1.0

    def loss_fn(p, want_grads):
        logits, cache = encoder_forward_batch(p, config, x)
        loss, dlogits = cross_entropy_soft(logits, targets)
        if not want_grads:
            return loss, None
        return loss, encoder_backward(cache, dlogits)

    return grad_check(params, loss_fn, trials=trials, h=h, rng=rng)


def grounding_grad_check(
    config: EncoderConfig | None = None,
    trials: int = 100,
    h: float = 1e-5,
    seed: int = 0,
    batch: int = 2,
    T: int = 16,
) -> float:
    """Finite-difference check of the grounding head under BCE + L2."""
    config = config or GROUND_GRADCHECK_CONFIG
    if config.dropout_p:
        config = replace(config, dropout_p=0.0)
    rng = np.random.default_rng(seed)
    params = init_encoder_params(config, rng)
    x = rng.normal(size=(batch, T, config.input_dim))
    segments = np.zeros((batch, T), dtype=np.int64)
    segments[:, T // 2 :] = 1
    labels = rng.integers(0, 2, batch).astype(np.float64)
    offsets = rng.random(batch)

    def loss_fn(p, want_grads):
        outputs, cache = encoder_forward_batch(p, config, x, segments=segments)
        loss, dout = bce_plus_l2(outputs, labels, offsets)
        if not want_grads:
            return loss, None
        return loss, encoder_backward(cache, dout)

    return grad_check(params, loss_fn, trials=trials, h=h, rng=rng)
