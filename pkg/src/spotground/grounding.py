"""Replay grounding: pair sampling, the two-output head, post-processing.

The head sees the candidate chunk and the replay clip as one temporal
sequence (candidate first), distinguished by learned segment offsets, and
emits a replay probability plus the normalized position of the event
within the candidate chunk. Post-processing covers time-window filtering,
fusion with spotting output and the cross-model score-normalized NMS
merge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .checkpoint import KIND_GROUNDING, Model
from .data import FeatureSequence, GameHalf, ReplayAnnotation, extract_window
from .errors import IdentityError, ParseError, ShapeError
from .nn import (
    AdamState,
    EncoderConfig,
    adam_step,
    bce_plus_l2,
    encoder_backward,
    encoder_forward_batch,
    init_encoder_params,
    sigmoid,
)
from .spotting import SpotPrediction, TrainSpec

logger = logging.getLogger(__name__)

CANDIDATE_CHUNK_S = 30
PRE_REPLAY_WINDOW_S = 120
POSITIVES_PER_REPLAY = 4
NEGATIVES_PER_REPLAY = 4
DEFAULT_FUSION_LABELS = frozenset({"Foul", "Goal", "Shots-off target"})


@dataclass(frozen=True)
class GroundingSample:
    candidate: np.ndarray  # (chunk_s, D)
    replay: np.ndarray  # (chunk_s, D)
    label: int  # 1 if the candidate contains the source event
    offset_target: float | None  # event position in [0, 1], positives only

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ShapeError(f"label must be 0 or 1, got {self.label}")
        if (self.offset_target is None) == (self.label == 1):
            raise ShapeError("offset_target must be present exactly when label = 1")


@dataclass(frozen=True)
class GroundingPrediction:
    game_id: str
    half: int
    time_s: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ShapeError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class ReplayQuery:
    game_id: str
    half: int
    start_s: int
    end_s: int


def replay_clip(features: FeatureSequence, start_s: int, end_s: int,
                chunk_s: int = CANDIDATE_CHUNK_S) -> np.ndarray:
    """The replay interval's rows, truncated or zero-padded to chunk_s."""
    clip = np.zeros((chunk_s, features.dim), dtype=features.data.dtype)
    n = min(chunk_s, end_s - start_s)
    if n > 0:
        clip[:n] = extract_window(features.data, start_s, n)
    return clip


def sample_grounding_pairs(
    replay: ReplayAnnotation,
    features: FeatureSequence,
    rng: np.random.Generator,
    chunk_s: int = CANDIDATE_CHUNK_S,
    window_s: int = PRE_REPLAY_WINDOW_S,
    n_pos: int = POSITIVES_PER_REPLAY,
    n_neg: int = NEGATIVES_PER_REPLAY,
    margin_s: int = 2,
) -> list[GroundingSample]:
    """Draw positive/negative candidate chunks from the pre-replay window.

    Positives contain the source event (placed at a random offset at least
    margin_s from the chunk edge when possible); negatives keep the event
    at least margin_s outside the chunk. Replays whose event is not inside
    the window are skipped with a warning.
    """
    if (replay.game_id, replay.half) != (features.game_id, features.half):
        raise IdentityError("replay annotation and features describe different halves")
    start = replay.replay_start_s
    window_lo = max(0, start - window_s)
    last_start = start - chunk_s
    event = replay.event_time_s
    if not (window_lo <= event <= start):
        logger.warning(
            "replay at %d s: event at %d s outside [%d, %d], skipped",
            start, event, window_lo, start,
        )
        return []
    if last_start < window_lo:
        logger.warning("replay at %d s: window too short for a %d s chunk", start, chunk_s)
        return []

    pos_lo = max(window_lo, event - chunk_s + margin_s)
    pos_hi = min(event - margin_s, last_start)
    if pos_lo > pos_hi:  # event too close to an edge for the margin, relax it
        pos_lo = max(window_lo, event - chunk_s)
        pos_hi = min(event, last_start)
    if pos_lo > pos_hi:
        logger.warning("replay at %d s: no positive chunk placement possible", start)
        return []

    clip = replay_clip(features, start, replay.replay_end_s, chunk_s)
    samples: list[GroundingSample] = []
    for _ in range(n_pos):
        cs = int(rng.integers(pos_lo, pos_hi + 1))
        samples.append(
            GroundingSample(
                extract_window(features.data, cs, chunk_s),
                clip,
                1,
                (event - cs) / chunk_s,
            )
        )
    neg_starts = np.array(
        [
            cs
            for cs in range(window_lo, last_start + 1)
            if not (cs - margin_s <= event <= cs + chunk_s + margin_s)
        ]
    )
    if neg_starts.size == 0:
        logger.warning("replay at %d s: no negative chunk placement possible", start)
    else:
        for cs in rng.choice(neg_starts, size=n_neg, replace=True):
            samples.append(
                GroundingSample(extract_window(features.data, int(cs), chunk_s), clip, 0, None)
            )
    return samples


def _segments(chunk_s: int) -> np.ndarray:
    seg = np.zeros(2 * chunk_s, dtype=np.int64)
    seg[chunk_s:] = 1
    return seg


def _stack_samples(samples: list[GroundingSample]):
    X = np.stack(
        [np.concatenate([s.candidate, s.replay], axis=0) for s in samples]
    ).astype(np.float64)
    labels = np.array([s.label for s in samples], dtype=np.float64)
    offsets = np.array(
        [s.offset_target if s.offset_target is not None else 0.0 for s in samples]
    )
    return X, labels, offsets


def ground_forward(model: Model, sample: GroundingSample) -> tuple[float, float]:
    """(replay probability, raw positional offset) for one sample."""
    X, _, _ = _stack_samples([sample])
    out, _ = encoder_forward_batch(
        model.params, model.config, X, segments=_segments(sample.candidate.shape[0])[None]
    )
    return float(sigmoid(out[0, 0])), float(out[0, 1])


def ground_loss(pred: tuple[float, float], sample: GroundingSample,
                offset_weight: float = 1.0) -> float:
    """BCE on the probability plus weighted squared offset error (positives)."""
    prob, offset = pred
    p = min(max(prob, 1e-7), 1.0 - 1e-7)
    loss = -(sample.label * np.log(p) + (1 - sample.label) * np.log(1.0 - p))
    if sample.label == 1:
        loss += offset_weight * (offset - sample.offset_target) ** 2
    return float(loss)


def default_grounding_config(input_dim: int, dropout_p: float = 0.1) -> EncoderConfig:
    return EncoderConfig(
        input_dim=input_dim,
        output_dim=2,
        model_dim=64,
        num_layers=4,
        num_heads=4,
        hidden_dim=256,
        dropout_p=dropout_p,
        num_segments=2,
    )


def train_grounding(
    halves: list[GameHalf],
    spec: TrainSpec,
    config: EncoderConfig | None = None,
    chunk_s: int = CANDIDATE_CHUNK_S,
    offset_weight: float = 1.0,
) -> Model:
    """Train the grounding head; pairs are re-sampled every epoch.

    Deterministic for a given (spec.seed, config). spec.lr/epochs default
    to 2e-4 and 40 via the CLI.
    """
    replays = [(gh, rp) for gh in halves for rp in gh.replays]
    if not replays:
        raise ParseError("empty dataset: no replay annotations")
    input_dim = halves[0].features.dim
    if config is None:
        config = default_grounding_config(input_dim)
    if config.output_dim != 2 or config.num_segments != 2:
        raise ShapeError("grounding config needs output_dim=2 and num_segments=2")
    if config.input_dim != input_dim:
        raise ShapeError(f"config input_dim {config.input_dim} != data dim {input_dim}")

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))
    params = init_encoder_params(config, rng)
    model = Model(kind=KIND_GROUNDING, config=config, vocab=[], params=params,
                  opt=AdamState.for_params(params))
    seg_row = _segments(chunk_s)

    for epoch in range(spec.epochs):
        samples: list[GroundingSample] = []
        for gh, rp in replays:
            samples.extend(sample_grounding_pairs(rp, gh.features, rng, chunk_s=chunk_s))
        if not samples:
            raise ParseError("no usable grounding samples (all replays skipped)")
        X, labels, offsets = _stack_samples(samples)
        perm = rng.permutation(len(X))
        epoch_loss = 0.0
        for lo in range(0, len(X), spec.batch_size):
            idx = perm[lo : lo + spec.batch_size]
            xb = X[idx]
            seg = np.broadcast_to(seg_row, (len(idx), seg_row.size))
            out, cache = encoder_forward_batch(
                model.params, config, xb, segments=seg, train_mode=True, rng=rng
            )
            loss, dout = bce_plus_l2(out, labels[idx], offsets[idx], offset_weight)
            grads = encoder_backward(cache, dout)
            adam_step(model.params, grads, model.opt, spec.lr)
            epoch_loss += loss * len(idx)
        model.history.append({"epoch": epoch, "train_loss": epoch_loss / len(X)})
        logger.debug("grounding epoch %d: %s", epoch, model.history[-1])
    return model


def infer_grounding(
    model: Model,
    query: ReplayQuery,
    features: FeatureSequence,
    stride_s: int = 5,
    chunk_s: int = CANDIDATE_CHUNK_S,
    window_s: int = PRE_REPLAY_WINDOW_S,
) -> list[GroundingPrediction]:
    """Slide candidate chunks over the pre-replay window.

    Every candidate yields one prediction: time = chunk start + chunk_s *
    clamp(offset, 0, 1), confidence = replay probability. Post-processing
    (filtering, fusion, merging) is separate.
    """
    if (query.game_id, query.half) != (features.game_id, features.half):
        raise IdentityError("query and features describe different halves")
    if stride_s < 1:
        raise ShapeError("stride must be >= 1 s")
    window_lo = max(0, query.start_s - window_s)
    last_start = query.start_s - chunk_s
    starts = list(range(window_lo, last_start + 1, stride_s))
    if not starts:
        return []
    clip = replay_clip(features, query.start_s, query.end_s, chunk_s)
    X = np.stack(
        [
            np.concatenate([extract_window(features.data, cs, chunk_s), clip], axis=0)
            for cs in starts
        ]
    ).astype(np.float64)
    seg = np.broadcast_to(_segments(chunk_s), (len(starts), 2 * chunk_s))
    out, _ = encoder_forward_batch(model.params, model.config, X, segments=seg)
    probs = sigmoid(out[:, 0])
    offsets = np.clip(out[:, 1], 0.0, 1.0)
    preds = []
    for cs, prob, off in zip(starts, probs, offsets):
        t = int(round(cs + chunk_s * float(off)))
        preds.append(GroundingPrediction(query.game_id, query.half, t, float(prob)))
    return preds


# ---------------------------------------------------------------------------
# post-processing


def filter_predictions(
    preds: list[GroundingPrediction], replay_end_s: int, threshold_s: int
) -> list[GroundingPrediction]:
    """Keep predictions inside [replay_end - threshold, replay_end]."""
    if threshold_s <= 0:
        raise ShapeError("filter threshold must be positive")
    return [p for p in preds if replay_end_s - threshold_s <= p.time_s <= replay_end_s]


def fuse_with_spotting(
    spot_preds: list[SpotPrediction],
    replay_start_s: int,
    W: int = 42,
    S: float = 0.02,
    beta1: float = 1.25,
    beta2: float = 0.8,
    allowed_labels: frozenset[str] | set[str] = DEFAULT_FUSION_LABELS,
) -> list[GroundingPrediction]:
    """Turn nearby spotting output into grounding predictions.

    Keep spots with an allowed label and confidence above S that fall in
    [T - W, T]; the nearest and second-nearest to T (ties to the earlier
    timestamp) are emitted with confidences beta1 * conf and beta2 * conf,
    clamped to [0, 1].
    """
    T = replay_start_s
    eligible = [
        p
        for p in spot_preds
        if p.label in allowed_labels and p.confidence > S and T - W <= p.time_s <= T
    ]
    eligible.sort(key=lambda p: (abs(T - p.time_s), p.time_s, -p.confidence, p.class_index))
    out = []
    for p, beta in zip(eligible[:2], (beta1, beta2)):
        conf = min(max(beta * p.confidence, 0.0), 1.0)
        out.append(GroundingPrediction(p.game_id, p.half, p.time_s, conf))
    return out


def minmax_normalize(values: list[float]) -> list[float]:
    """Min-max to [0, 1]; constant (or single-element) input maps to 1.0."""
    if not values:
        return []
    lo, hi = min(values), max(values)
    if hi == lo:
        return [1.0] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def merge_nms(
    preds_a: list[GroundingPrediction],
    preds_b: list[GroundingPrediction],
    window_s: int = 25,
) -> list[GroundingPrediction]:
    """Normalize each source's scores to [0, 1], union, greedy temporal NMS."""
    pool: list[GroundingPrediction] = []
    for preds in (preds_a, preds_b):
        for p, conf in zip(preds, minmax_normalize([p.confidence for p in preds])):
            pool.append(GroundingPrediction(p.game_id, p.half, p.time_s, conf))
    pool.sort(key=lambda p: (-p.confidence, p.time_s))
    kept: list[GroundingPrediction] = []
    for p in pool:
        if all(abs(p.time_s - q.time_s) > window_s for q in kept):
            kept.append(p)
    return sorted(kept, key=lambda p: p.time_s)
