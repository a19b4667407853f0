"""Feature and annotation ingestion.

Covers the per-second embedding matrices (NPY files, one per game half
and source), the label JSON files, multi-source feature combination and
snippet dataset construction for classifier-style pretraining.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    DomainError,
    IdentityError,
    ParseError,
    ShapeError,
    VocabularyError,
)
from .npyio import read_npy_file
from .vocab import BACKGROUND_INDEX, DEFAULT_VOCAB, label_index

logger = logging.getLogger(__name__)

GAME_TIME_RE = re.compile(r"^\s*(\d+)\s*-\s*(\d{1,3}):([0-5]\d)\s*$")


@dataclass(frozen=True)
class FeatureSequence:
    """Per-second embeddings for one half of one game (T rows, D columns)."""

    game_id: str
    half: int
    data: np.ndarray
    source_dims: tuple[int, ...]
    fps: int = 1

    def __post_init__(self):
        if self.half not in (1, 2):
            raise DomainError(f"half must be 1 or 2, got {self.half}")
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ShapeError(f"feature matrix must be T x D with T,D >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("feature matrix contains non-finite values")
        if sum(self.source_dims) != self.data.shape[1]:
            raise ShapeError(
                f"source_dims {self.source_dims} sum to {sum(self.source_dims)}, "
                f"but D = {self.data.shape[1]}"
            )

    @property
    def duration_s(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class EventAnnotation:
    game_id: str
    half: int
    time_s: int
    label: str

    def __post_init__(self):
        if self.time_s < 0:
            raise ParseError(f"event time must be non-negative, got {self.time_s}")


@dataclass(frozen=True)
class ReplayAnnotation:
    game_id: str
    half: int
    replay_start_s: int
    replay_end_s: int
    event_time_s: int
    event_label: str

    def __post_init__(self):
        if not self.replay_start_s < self.replay_end_s:
            raise ParseError(
                f"replay interval [{self.replay_start_s}, {self.replay_end_s}] is empty"
            )
        if self.event_time_s > self.replay_end_s:
            raise ParseError("source event lies after the replay end")

    @property
    def interval_s(self) -> int:
        """Gap between replay end and the original event."""
        return self.replay_end_s - self.event_time_s


@dataclass(frozen=True)
class Snippet:
    features: np.ndarray
    target_class: int


def parse_game_time(s: str) -> tuple[int, int]:
    """Parse "H - MM:SS" into (half, seconds within the half)."""
    m = GAME_TIME_RE.match(s)
    if m is None:
        raise ParseError(f"bad game time {s!r}, expected '<half> - <MM>:<SS>'")
    half, minutes, seconds = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if half not in (1, 2):
        raise DomainError(f"half must be 1 or 2, got {half}")
    return half, 60 * minutes + seconds


def format_game_time(half: int, time_s: int) -> str:
    return f"{half} - {time_s // 60:02d}:{time_s % 60:02d}"


def parse_labels(
    stream: bytes | str,
    game_id: str = "",
    vocab: list[str] | tuple[str, ...] | None = None,
    strict: bool = False,
) -> tuple[list[EventAnnotation], list[ReplayAnnotation]]:
    """Parse a label JSON document into event and replay annotations.

    The document may carry an "annotations" array, a "replays" array, or
    both. Unknown labels are logged (strict=False) or raised (strict=True)
    against the given vocabulary; entries are never silently dropped.
    """
    try:
        doc = json.loads(stream)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed label JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError("label document must be a JSON object")
    known = set(vocab if vocab is not None else DEFAULT_VOCAB)

    def check_label(label):
        if not isinstance(label, str) or not label:
            raise ParseError(f"bad label {label!r}")
        if label not in known:
            if strict:
                raise VocabularyError(f"label {label!r} is not in the configured vocabulary")
            logger.warning("unknown label %r in %s", label, game_id or "<stream>")

    events: list[EventAnnotation] = []
    for entry in doc.get("annotations", []):
        if "gameTime" not in entry or "label" not in entry:
            raise ParseError(f"annotation entry missing gameTime/label: {entry!r}")
        half, secs = parse_game_time(entry["gameTime"])
        check_label(entry["label"])
        events.append(EventAnnotation(game_id, half, secs, entry["label"]))

    replays: list[ReplayAnnotation] = []
    for entry in doc.get("replays", []):
        for key in ("start", "end", "event", "label"):
            if key not in entry:
                raise ParseError(f"replay entry missing {key!r}: {entry!r}")
        h_start, start = parse_game_time(entry["start"])
        h_end, end = parse_game_time(entry["end"])
        h_event, event = parse_game_time(entry["event"])
        if not (h_start == h_end == h_event):
            raise ParseError(f"replay entry spans halves: {entry!r}")
        check_label(entry["label"])
        replays.append(ReplayAnnotation(game_id, h_start, start, end, event, entry["label"]))

    return events, replays


def combine_features(sources: list[FeatureSequence], length_slack_s: int = 2) -> FeatureSequence:
    """L2-normalize each source per frame, then concatenate along features.

    All sources must describe the same game half; lengths may differ by at
    most length_slack_s seconds and are truncated to the shortest. Frames
    with zero norm are kept as zero vectors and counted in a warning.
    """
    if not sources:
        raise ShapeError("combine_features needs at least one source")
    first = sources[0]
    for src in sources[1:]:
        if (src.game_id, src.half, src.fps) != (first.game_id, first.half, first.fps):
            raise IdentityError(
                f"sources disagree on identity: {(src.game_id, src.half)} vs "
                f"{(first.game_id, first.half)}"
            )
    lengths = [src.duration_s for src in sources]
    t_min, t_max = min(lengths), max(lengths)
    if t_max - t_min > length_slack_s:
        raise AlignmentError(f"source lengths {lengths} differ by more than {length_slack_s} s")

    zero_frames = 0
    blocks = []
    for src in sources:
        block = src.data[:t_min].astype(np.float32, copy=True)
        norms = np.linalg.norm(block, axis=1, keepdims=True)
        zero = norms[:, 0] == 0.0
        zero_frames += int(zero.sum())
        norms[zero] = 1.0  # leave zero frames untouched
        block /= norms
        blocks.append(block)
    if zero_frames:
        logger.warning(
            "combine_features: %d zero-norm frame(s) left as zero vectors", zero_frames
        )
    combined = np.concatenate(blocks, axis=1)
    dims = tuple(d for src in sources for d in src.source_dims)
    return FeatureSequence(first.game_id, first.half, combined, dims, first.fps)


def extract_window(data: np.ndarray, start_s: int, length_s: int) -> np.ndarray:
    """Rows [start_s, start_s + length_s) of data, zero-padded outside [0, T)."""
    T, D = data.shape
    out = np.zeros((length_s, D), dtype=data.dtype)
    lo = max(start_s, 0)
    hi = min(start_s + length_s, T)
    if lo < hi:
        out[lo - start_s : hi - start_s] = data[lo:hi]
    return out


def build_snippet_dataset(
    features: FeatureSequence,
    events: list[EventAnnotation],
    snippet_len_s: int = 5,
    background_ratio: float = 1.0,
    vocab: list[str] | tuple[str, ...] | None = None,
    seed: int = 0,
) -> list[Snippet]:
    """Extract one snippet per event plus uniformly sampled background snippets.

    Event snippets are centered on the event timestamp (boundary snippets
    zero-padded); background snippets are drawn from seconds farther than
    snippet_len_s from every event and carry the background class index.
    """
    if snippet_len_s < 1:
        raise ShapeError("snippet length must be >= 1 s")
    vocab = list(vocab if vocab is not None else DEFAULT_VOCAB)
    T = features.duration_s
    half_len = snippet_len_s // 2

    snippets: list[Snippet] = []
    kept_events = []
    for ev in events:
        if ev.time_s >= T:
            logger.warning("event at %d s outside %d s features, skipped", ev.time_s, T)
            continue
        kept_events.append(ev)
        window = extract_window(features.data, ev.time_s - half_len, snippet_len_s)
        snippets.append(Snippet(window, label_index(vocab, ev.label)))

    n_background = int(round(background_ratio * len(kept_events)))
    if n_background > 0:
        event_times = np.array([ev.time_s for ev in kept_events], dtype=np.int64)
        seconds = np.arange(T)
        if event_times.size:
            dist = np.abs(seconds[:, None] - event_times[None, :]).min(axis=1)
            candidates = seconds[dist > snippet_len_s]
        else:
            candidates = seconds
        if candidates.size == 0:
            logger.warning("no background seconds available, skipping background snippets")
        else:
            rng = np.random.default_rng(seed)
            picks = rng.choice(candidates, size=n_background, replace=True)
            for t in picks:
                window = extract_window(features.data, int(t) - half_len, snippet_len_s)
                snippets.append(Snippet(window, BACKGROUND_INDEX))
    return snippets


@dataclass
class GameHalf:
    """One half of one game: features plus its ground-truth annotations."""

    features: FeatureSequence
    events: list[EventAnnotation] = field(default_factory=list)
    replays: list[ReplayAnnotation] = field(default_factory=list)


def load_game_half(game_dir: str | Path, game_id: str, half: int) -> FeatureSequence:
    """Load and combine every "<half>_<source>.npy" file in a game directory."""
    game_dir = Path(game_dir)
    paths = sorted(game_dir.glob(f"{half}_*.npy"))
    if not paths:
        raise ParseError(f"no feature files matching '{half}_*.npy' in {game_dir}")
    sources = []
    for path in paths:
        matrix = read_npy_file(path)
        sources.append(
            FeatureSequence(game_id, half, matrix, (matrix.shape[1],))
        )
    return combine_features(sources)


def load_game(game_dir: str | Path, vocab=None, strict: bool = False) -> list[GameHalf]:
    """Load both halves of a game directory together with its labels.

    Events and replays may live in one labels.json or in separate
    labels.json / replays.json documents.
    """
    game_dir = Path(game_dir)
    game_id = game_dir.name
    events: list[EventAnnotation] = []
    replays: list[ReplayAnnotation] = []
    for name in ("labels.json", "replays.json"):
        path = game_dir / name
        if path.exists():
            evs, rps = parse_labels(
                path.read_bytes(), game_id=game_id, vocab=vocab, strict=strict
            )
            events.extend(evs)
            replays.extend(rps)
    halves = []
    for half in (1, 2):
        if not list(game_dir.glob(f"{half}_*.npy")):
            continue
        features = load_game_half(game_dir, game_id, half)
        halves.append(
            GameHalf(
                features,
                [e for e in events if e.half == half],
                [r for r in replays if r.half == half],
            )
        )
    if not halves:
        raise ParseError(f"{game_dir} contains no feature files")
    return halves


def load_dataset(root: str | Path, vocab=None, strict: bool = False) -> list[GameHalf]:
    """Load every game directory under root (any directory with NPY files)."""
    root = Path(root)
    halves: list[GameHalf] = []
    for game_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if not any(game_dir.glob("*_*.npy")):
            continue
        halves.extend(load_game(game_dir, vocab=vocab, strict=strict))
    if not halves:
        raise ParseError(f"no game directories with feature files under {root}")
    return halves
