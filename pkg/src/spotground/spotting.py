"""Action spotting: chunk datasets, the two heads, training and inference.

A half is cut into fixed-length chunks; each chunk is classified into one
of 17 event classes or background. Inference slides a window at 1 s
stride, assigns probabilities to window centers and reduces the per-class
score series with greedy temporal NMS.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import KIND_SPOT_NETVLAD, KIND_SPOT_TRANSFORMER, Model
from .data import EventAnnotation, FeatureSequence, GameHalf, extract_window
from .errors import ParseError, ShapeError
from .nn import (
    AdamState,
    EncoderConfig,
    adam_step,
    cross_entropy_soft,
    encoder_backward,
    encoder_forward_batch,
    init_encoder_params,
    softmax,
)
from .vocab import BACKGROUND_INDEX, DEFAULT_VOCAB, NUM_OUTPUT_CLASSES, label_index

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Chunk:
    """A chunk of the feature sequence plus its 18-way target distribution."""

    features: np.ndarray  # (L, D)
    target: np.ndarray  # (18,), entries >= 0 summing to 1
    origin: tuple[str, int, int]  # (game_id, half, start_s)


@dataclass(frozen=True)
class SpotPrediction:
    game_id: str
    half: int
    time_s: int
    class_index: int
    label: str
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ShapeError(f"confidence {self.confidence} outside [0, 1]")
        if not 0 <= self.class_index < BACKGROUND_INDEX:
            raise ShapeError("background is never emitted as a prediction")


@dataclass(frozen=True)
class TrainSpec:
    mode: str = "ultra"  # "regular" keeps the best-validation checkpoint
    lr: float = 5e-4
    epochs: int = 50
    batch_size: int = 32
    chunk_size_s: int = 7
    nms_window_s: int = 20
    mixup_alpha: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("regular", "ultra"):
            raise ShapeError(f"mode must be regular or ultra, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.chunk_size_s < 1:
            raise ShapeError("epochs, batch_size and chunk_size_s must be positive")


@dataclass
class DatasetSplits:
    train: list[GameHalf]
    valid: list[GameHalf] = field(default_factory=list)
    test: list[GameHalf] = field(default_factory=list)

    def pooled(self) -> list[GameHalf]:
        return list(self.train) + list(self.valid) + list(self.test)


def make_chunks(
    features: FeatureSequence,
    events: list[EventAnnotation],
    chunk_size_s: int,
    stride_s: int,
    vocab=DEFAULT_VOCAB,
) -> list[Chunk]:
    """Tile the half into chunks and label each with the event nearest its
    center (earlier timestamp wins exact ties), or background."""
    if chunk_size_s < 1 or stride_s < 1:
        raise ShapeError("chunk size and stride must be >= 1 s")
    T = features.duration_s
    chunks = []
    for start in range(0, T, stride_s):
        inside = [ev for ev in events if start <= ev.time_s < start + chunk_size_s]
        target = np.zeros(NUM_OUTPUT_CLASSES)
        if inside:
            center = start + chunk_size_s / 2.0
            best = min(inside, key=lambda ev: (abs(ev.time_s - center), ev.time_s))
            target[label_index(vocab, best.label)] = 1.0
        else:
            target[BACKGROUND_INDEX] = 1.0
        window = extract_window(features.data, start, chunk_size_s)
        chunks.append(Chunk(window, target, (features.game_id, features.half, start)))
    return chunks


def mixup(a: Chunk, b: Chunk, alpha: float, rng: np.random.Generator, lam: float | None = None) -> Chunk:
    """Convex combination of two chunks with a Beta(alpha, alpha) coefficient."""
    if a.features.shape != b.features.shape:
        raise ShapeError(f"mixup shapes differ: {a.features.shape} vs {b.features.shape}")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    feats = lam * a.features.astype(np.float64) + (1.0 - lam) * b.features.astype(np.float64)
    target = lam * a.target + (1.0 - lam) * b.target
    return Chunk(feats, target, a.origin)


# ---------------------------------------------------------------------------
# NetVLAD++-style pooling head


@dataclass(frozen=True)
class NetVLADConfig:
    input_dim: int
    output_dim: int = NUM_OUTPUT_CLASSES
    clusters: int = 64

    def __post_init__(self):
        if self.clusters < 1:
            raise ShapeError("need at least one cluster")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "clusters": self.clusters,
        }


def init_netvlad_params(config: NetVLADConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    D, K = config.input_dim, config.clusters
    limit = np.sqrt(6.0 / (D + K))
    p: dict[str, np.ndarray] = {}
    for half in ("past", "future"):
        p[f"vlad.{half}.assign_w"] = rng.uniform(-limit, limit, size=(D, K))
        p[f"vlad.{half}.assign_b"] = np.zeros(K)
        p[f"vlad.{half}.centers"] = rng.normal(0.0, 1.0 / np.sqrt(D), size=(K, D))
    out_in = 2 * K * D
    lim_out = np.sqrt(6.0 / (out_in + config.output_dim))
    p["vlad.out.w"] = rng.uniform(-lim_out, lim_out, size=(out_in, config.output_dim))
    p["vlad.out.b"] = np.zeros(config.output_dim)
    return p


def _safe_row_normalize(v: np.ndarray):
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return v / safe, norms


def _vlad_half_forward(params, prefix, xh):
    logits = xh @ params[prefix + "assign_w"] + params[prefix + "assign_b"]
    assign = softmax(logits, axis=-1)  # (B, Th, K)
    mass = assign.sum(axis=1)  # (B, K)
    centers = params[prefix + "centers"]
    vlad = np.einsum("btk,btd->bkd", assign, xh) - mass[:, :, None] * centers[None]
    normed, norms = _safe_row_normalize(vlad)
    rec = {"xh": xh, "assign": assign, "mass": mass, "vlad": vlad, "norms": norms,
           "normed": normed}
    return normed.reshape(xh.shape[0], -1), rec


def netvlad_forward_batch(params, config: NetVLADConfig, x: np.ndarray):
    """Past/future VLAD descriptors, intra- then L2-normalized, to logits."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected (B, L, D), got {x.shape}")
    B, L, D = x.shape
    if L % 2 != 0:
        raise ShapeError(f"NetVLAD pooling needs an even chunk length, got L={L}")
    if D != config.input_dim:
        raise ShapeError(f"input dim {D} != configured {config.input_dim}")
    half = L // 2
    flat_p, rec_p = _vlad_half_forward(params, "vlad.past.", x[:, :half])
    flat_f, rec_f = _vlad_half_forward(params, "vlad.future.", x[:, half:])
    desc = np.concatenate([flat_p, flat_f], axis=1)  # (B, 2KD)
    out_desc, desc_norms = _safe_row_normalize(desc)
    logits = out_desc @ params["vlad.out.w"] + params["vlad.out.b"]
    cache = {
        "params": params,
        "config": config,
        "past": rec_p,
        "future": rec_f,
        "desc": desc,
        "desc_norms": desc_norms,
        "out_desc": out_desc,
    }
    return logits, cache


def netvlad_pool_forward(params, x: np.ndarray, config: NetVLADConfig):
    """Single-chunk convenience wrapper: x is (L, D), returns 18 logits."""
    logits, _ = netvlad_forward_batch(params, config, np.asarray(x)[None])
    return logits[0]


def _l2_normalize_backward(dy, v, norms):
    # y = v / ||v|| rowwise; zero rows pass zero gradient
    safe = np.where(norms > 0.0, norms, 1.0)
    y = v / safe
    dv = (dy - y * (y * dy).sum(axis=-1, keepdims=True)) / safe
    return np.where(norms > 0.0, dv, 0.0)


def _vlad_half_backward(params, prefix, rec, dflat, grads):
    xh, assign, mass = rec["xh"], rec["assign"], rec["mass"]
    B = xh.shape[0]
    K, D = params[prefix + "centers"].shape
    dnormed = dflat.reshape(B, K, D)
    dvlad = _l2_normalize_backward(dnormed, rec["vlad"], rec["norms"])
    centers = params[prefix + "centers"]
    grads[prefix + "centers"] = -np.einsum("bk,bkd->kd", mass, dvlad)
    dmass = -np.einsum("bkd,kd->bk", dvlad, centers)
    dassign = np.einsum("bkd,btd->btk", dvlad, xh) + dmass[:, None, :]
    dlogits = assign * (dassign - (dassign * assign).sum(axis=-1, keepdims=True))
    grads[prefix + "assign_w"] = np.einsum("btd,btk->dk", xh, dlogits)
    grads[prefix + "assign_b"] = dlogits.sum(axis=(0, 1))
    return np.einsum("btk,bkd->btd", assign, dvlad) + dlogits @ params[prefix + "assign_w"].T


def netvlad_backward(cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    params = cache["params"]
    grads: dict[str, np.ndarray] = {}
    out_desc = cache["out_desc"]
    grads["vlad.out.w"] = out_desc.T @ np.atleast_2d(dlogits)
    grads["vlad.out.b"] = np.atleast_2d(dlogits).sum(axis=0)
    ddesc = np.atleast_2d(dlogits) @ params["vlad.out.w"].T
    ddesc = _l2_normalize_backward(ddesc, cache["desc"], cache["desc_norms"])
    half = ddesc.shape[1] // 2
    _vlad_half_backward(params, "vlad.past.", cache["past"], ddesc[:, :half], grads)
    _vlad_half_backward(params, "vlad.future.", cache["future"], ddesc[:, half:], grads)
    return grads


# ---------------------------------------------------------------------------
# training


def spot_forward(model: Model, chunk_features: np.ndarray) -> np.ndarray:
    """18-class probability vector for one chunk."""
    x = np.asarray(chunk_features, dtype=np.float64)[None]
    logits = _head_forward(model, x)[0]
    return softmax(logits[0])


def _head_forward(model: Model, xb: np.ndarray, train_mode=False, rng=None):
    if model.kind == KIND_SPOT_TRANSFORMER:
        return encoder_forward_batch(model.params, model.config, xb,
                                     train_mode=train_mode, rng=rng)
    if model.kind == KIND_SPOT_NETVLAD:
        return netvlad_forward_batch(model.params, model.config, xb)
    raise ShapeError(f"unknown spotting head {model.kind!r}")


def _head_backward(model: Model, cache, dlogits):
    if model.kind == KIND_SPOT_TRANSFORMER:
        return encoder_backward(cache, dlogits)
    return netvlad_backward(cache, dlogits)


def default_spot_lr(head: str) -> float:
    return 5e-4 if head == "transformer" else 1e-4


def default_spot_epochs(head: str) -> int:
    return 50 if head == "transformer" else 40


def _chunk_tensors(halves, spec, vocab):
    chunks = []
    for gh in halves:
        chunks.extend(
            make_chunks(gh.features, gh.events, spec.chunk_size_s, spec.chunk_size_s, vocab)
        )
    if not chunks:
        raise ParseError("empty dataset: no chunks to train on")
    X = np.stack([c.features for c in chunks]).astype(np.float64)
    Y = np.stack([c.target for c in chunks])
    return X, Y


def _eval_loss(model, X, Y, batch_size):
    total = 0.0
    for lo in range(0, len(X), batch_size):
        xb, yb = X[lo : lo + batch_size], Y[lo : lo + batch_size]
        logits, _ = _head_forward(model, xb)
        loss, _ = cross_entropy_soft(logits, yb)
        total += loss * len(xb)
    return total / len(X)


def train_spotting(
    splits: DatasetSplits,
    spec: TrainSpec,
    head: str = "transformer",
    config: EncoderConfig | NetVLADConfig | None = None,
    vocab=DEFAULT_VOCAB,
) -> Model:
    """Train a spotting head. Deterministic for a given (spec.seed, config).

    Regular mode trains on the train split and returns the parameters with
    the best validation loss; ultra mode pools every split and returns the
    final epoch.
    """
    if head not in ("transformer", "netvlad"):
        raise ShapeError(f"unknown head {head!r}")
    halves = splits.pooled() if spec.mode == "ultra" else list(splits.train)
    if not halves:
        raise ParseError("empty dataset")
    if spec.mode == "regular" and not splits.valid:
        raise ParseError("regular mode needs a validation split")

    X, Y = _chunk_tensors(halves, spec, vocab)
    input_dim = X.shape[2]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))
    if head == "transformer":
        if config is None:
            config = EncoderConfig(input_dim=input_dim, output_dim=NUM_OUTPUT_CLASSES)
        params = init_encoder_params(config, rng)
        kind = KIND_SPOT_TRANSFORMER
    else:
        if config is None:
            config = NetVLADConfig(input_dim=input_dim)
        params = init_netvlad_params(config, rng)
        kind = KIND_SPOT_NETVLAD
    if config.output_dim != NUM_OUTPUT_CLASSES:
        raise ShapeError(f"spotting heads emit {NUM_OUTPUT_CLASSES} classes, "
                         f"config has {config.output_dim}")
    if config.input_dim != input_dim:
        raise ShapeError(f"config input_dim {config.input_dim} != data dim {input_dim}")

    model = Model(kind=kind, config=config, vocab=list(vocab), params=params,
                  opt=AdamState.for_params(params))
    valid_tensors = None
    if spec.mode == "regular":
        valid_tensors = _chunk_tensors(splits.valid, spec, vocab)
    best = None

    n = len(X)
    for epoch in range(spec.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, spec.batch_size):
            idx = perm[lo : lo + spec.batch_size]
            xb, yb = X[idx], Y[idx]
            if spec.mixup_alpha > 0.0:
                partner = rng.permutation(len(idx))
                lam = rng.beta(spec.mixup_alpha, spec.mixup_alpha, size=(len(idx), 1))
                xb = lam[:, :, None] * xb + (1.0 - lam[:, :, None]) * xb[partner]
                yb = lam * yb + (1.0 - lam) * yb[partner]
            logits, cache = _head_forward(model, xb, train_mode=True, rng=rng)
            loss, dlogits = cross_entropy_soft(logits, yb)
            grads = _head_backward(model, cache, dlogits)
            adam_step(model.params, grads, model.opt, spec.lr)
            epoch_loss += loss * len(idx)
        record = {"epoch": epoch, "train_loss": epoch_loss / n}
        if valid_tensors is not None:
            vloss = _eval_loss(model, *valid_tensors, spec.batch_size)
            record["valid_loss"] = vloss
            if best is None or vloss < best[0]:
                best = (vloss, copy.deepcopy(model.params), copy.deepcopy(model.opt))
        model.history.append(record)
        logger.debug("epoch %d: %s", epoch, record)

    if spec.mode == "regular" and best is not None:
        model.params = best[1]
        model.opt = best[2]
    return model


# ---------------------------------------------------------------------------
# inference


def nms_1d(preds: list[SpotPrediction], window_s: int) -> list[SpotPrediction]:
    """Greedy per-class, per-half temporal NMS.

    Accept the highest-confidence prediction, drop same-class predictions
    within +/-window_s of it, repeat. Survivors are returned time-sorted
    and are pairwise more than window_s apart within a class.
    """
    groups: dict[tuple, list[SpotPrediction]] = {}
    for p in preds:
        groups.setdefault((p.game_id, p.half, p.class_index), []).append(p)
    kept: list[SpotPrediction] = []
    for group in groups.values():
        group = sorted(group, key=lambda p: (-p.confidence, p.time_s))
        taken: list[int] = []
        for p in group:
            if all(abs(p.time_s - t) > window_s for t in taken):
                kept.append(p)
                taken.append(p.time_s)
    return sorted(kept, key=lambda p: (p.game_id, p.half, p.time_s, p.class_index))


def score_series(model: Model, features: FeatureSequence, chunk_size_s: int,
                 batch_size: int = 256) -> np.ndarray:
    """(T, 18) class probabilities, one row per second (window centers)."""
    data = features.data.astype(np.float64)
    T, D = data.shape
    left = chunk_size_s // 2
    padded = np.zeros((T + chunk_size_s - 1, D))
    padded[left : left + T] = data
    windows = np.lib.stride_tricks.sliding_window_view(padded, chunk_size_s, axis=0)
    windows = windows.transpose(0, 2, 1)  # (T, chunk, D)
    probs = np.empty((T, NUM_OUTPUT_CLASSES))
    for lo in range(0, T, batch_size):
        logits, _ = _head_forward(model, np.ascontiguousarray(windows[lo : lo + batch_size]))
        probs[lo : lo + logits.shape[0]] = softmax(logits, axis=-1)
    return probs


def select_predictions(
    probs: np.ndarray,
    game_id: str,
    half: int,
    vocab,
    threshold: float,
    nms_window_s: int,
) -> list[SpotPrediction]:
    """Threshold a (T, 18) score series and reduce it with per-class NMS.

    Selection depends only on the ordering of scores above the threshold,
    so any strictly increasing transform of the series leaves the
    surviving (time, class) set unchanged. Background is never emitted.
    """
    candidates: list[SpotPrediction] = []
    for c in range(BACKGROUND_INDEX):
        for t in np.nonzero(probs[:, c] >= threshold)[0]:
            candidates.append(
                SpotPrediction(
                    game_id,
                    half,
                    int(t),
                    c,
                    vocab[c] if c < len(vocab) else str(c),
                    float(probs[t, c]),
                )
            )
    return nms_1d(candidates, nms_window_s)


def spot_game(
    model: Model,
    features: FeatureSequence,
    chunk_size_s: int = 7,
    nms_window_s: int = 20,
    threshold: float = 0.05,
    batch_size: int = 256,
) -> list[SpotPrediction]:
    """Slide at 1 s stride, threshold the per-class score series, NMS."""
    probs = score_series(model, features, chunk_size_s, batch_size)
    return select_predictions(
        probs, features.game_id, features.half, model.vocab, threshold, nms_window_s
    )
