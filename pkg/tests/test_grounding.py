import numpy as np
import pytest

from conftest import make_features
from spotground.checkpoint import KIND_GROUNDING, Model
from spotground.data import GameHalf, ReplayAnnotation
from spotground.errors import ShapeError
from spotground.grounding import (
    GroundingPrediction,
    GroundingSample,
    ReplayQuery,
    default_grounding_config,
    filter_predictions,
    fuse_with_spotting,
    ground_forward,
    ground_loss,
    infer_grounding,
    merge_nms,
    minmax_normalize,
    sample_grounding_pairs,
    train_grounding,
)
from spotground.nn import init_encoder_params
from spotground.spotting import SpotPrediction, TrainSpec
from spotground.synth import SynthConfig, synth_dataset


def _replay(start=200, end=210, event=160, game_id="g0", half=1, label="Goal"):
    return ReplayAnnotation(game_id, half, start, end, event, label)


def _zero_ground_model(input_dim=8):
    config = default_grounding_config(input_dim, dropout_p=0.0)
    params = {k: np.zeros_like(v)
              for k, v in init_encoder_params(config, np.random.default_rng(0)).items()}
    return Model(KIND_GROUNDING, config, [], params)


class TestSampling:
    def test_positives_contain_event(self, rng):
        feats = make_features(T=400, D=8)
        samples = sample_grounding_pairs(_replay(), feats, rng)
        positives = [s for s in samples if s.label == 1]
        negatives = [s for s in samples if s.label == 0]
        assert len(positives) == 4 and len(negatives) == 4
        for s in positives:
            assert 0.0 <= s.offset_target <= 1.0
            # the candidate row at the offset is the event row
            row = int(round(s.offset_target * 30))
            if row < 30:
                np.testing.assert_array_equal(s.candidate[row], feats.data[160])

    def test_offset_zero_when_chunk_starts_at_event(self):
        feats = make_features(T=400, D=8)
        sample = GroundingSample(feats.data[160:190], feats.data[200:230], 1,
                                 (160 - 160) / 30)
        assert sample.offset_target == 0.0

    def test_negatives_exclude_event_over_many_replays(self, rng):
        feats = make_features(T=4000, D=8)
        checked = 0
        for i in range(500):
            event = int(rng.integers(130, 3800))
            start = event + int(rng.integers(5, 115))
            replay = _replay(start=start, end=start + 10, event=event)
            for s in sample_grounding_pairs(replay, feats, rng):
                if s.label == 0:
                    checked += 1
                    # event row must not be any candidate row
                    assert not any(
                        np.array_equal(row, feats.data[event]) for row in s.candidate
                    )
        assert checked > 1000

    def test_event_outside_window_skipped(self, rng, caplog):
        feats = make_features(T=600, D=8)
        replay = _replay(start=400, end=410, event=200)  # 200 s before start
        with caplog.at_level("WARNING"):
            assert sample_grounding_pairs(replay, feats, rng) == []
        assert "outside" in caplog.text

    def test_window_clipped_at_zero(self, rng):
        feats = make_features(T=300, D=8)
        replay = _replay(start=40, end=50, event=20)
        samples = sample_grounding_pairs(replay, feats, rng)
        positives = [s for s in samples if s.label == 1]
        assert positives  # window [0, 40] still admits chunks containing t=20

    def test_replay_clip_truncated_to_30s(self, rng):
        feats = make_features(T=400, D=8)
        replay = _replay(start=200, end=280, event=160)
        samples = sample_grounding_pairs(replay, feats, rng)
        assert all(s.replay.shape == (30, 8) for s in samples)
        np.testing.assert_array_equal(samples[0].replay, feats.data[200:230])

    def test_sample_invariants(self):
        with pytest.raises(ShapeError):
            GroundingSample(np.zeros((30, 4)), np.zeros((30, 4)), 1, None)
        with pytest.raises(ShapeError):
            GroundingSample(np.zeros((30, 4)), np.zeros((30, 4)), 0, 0.5)


class TestGroundForward:
    def test_zero_weights_probability_half(self, rng):
        model = _zero_ground_model()
        sample = GroundingSample(rng.normal(size=(30, 8)), rng.normal(size=(30, 8)), 0, None)
        prob, offset = ground_forward(model, sample)
        assert prob == 0.5
        assert offset == 0.0

    def test_eval_determinism(self, rng):
        config = default_grounding_config(8, dropout_p=0.0)
        model = Model(KIND_GROUNDING, config, [],
                      init_encoder_params(config, np.random.default_rng(1)))
        sample = GroundingSample(rng.normal(size=(30, 8)), rng.normal(size=(30, 8)), 0, None)
        assert ground_forward(model, sample) == ground_forward(model, sample)


class TestGroundLoss:
    def test_bce_at_half_with_exact_offset(self):
        sample = GroundingSample(np.zeros((30, 4)), np.zeros((30, 4)), 1, 0.4)
        assert ground_loss((0.5, 0.4), sample) == pytest.approx(np.log(2.0))

    def test_negative_ignores_offset(self):
        sample = GroundingSample(np.zeros((30, 4)), np.zeros((30, 4)), 0, None)
        assert ground_loss((0.5, 99.0), sample) == pytest.approx(np.log(2.0))

    def test_clamped_at_extremes(self):
        sample = GroundingSample(np.zeros((30, 4)), np.zeros((30, 4)), 0, None)
        assert np.isfinite(ground_loss((1.0, 0.0), sample))
        assert ground_loss((0.0, 0.0), sample) == pytest.approx(0.0, abs=1e-6)

    def test_nonnegative_and_zero_at_exact(self):
        pos = GroundingSample(np.zeros((30, 4)), np.zeros((30, 4)), 1, 0.7)
        assert ground_loss((1.0 - 1e-7, 0.7), pos) == pytest.approx(0.0, abs=1e-6)
        for prob in (0.1, 0.5, 0.9):
            for off in (0.0, 0.7, 1.0):
                assert ground_loss((prob, off), pos) >= 0.0


def _grounding_halves(seed=21, n_halves=4, sigma=0.0):
    cfg = SynthConfig(duration_s=1100, feature_dim=16, num_classes=2, events_per_class=3,
                      noise_sigma=sigma, min_gap_s=130, edge_margin_s=120,
                      num_halves=n_halves, with_replays=True, replay_delay_min_s=10,
                      replay_delay_max_s=110, replay_duration_s=8)
    return [GameHalf(f, e, r) for f, e, r in synth_dataset(cfg, seed=seed)]


@pytest.fixture(scope="module")
def trained_grounding():
    """One noiseless training run shared by the behavioural tests."""
    halves = _grounding_halves()
    spec = TrainSpec(mode="ultra", lr=5e-4, epochs=20, batch_size=16,
                     mixup_alpha=0.0, seed=2)
    model = train_grounding(halves, spec, config=default_grounding_config(16, dropout_p=0.0))
    return halves, model


class TestTrainGrounding:
    def test_loss_decreases_on_synthetic_replays(self, trained_grounding):
        halves, model = trained_grounding
        assert sum(len(gh.replays) for gh in halves) >= 20
        losses = [h["train_loss"] for h in model.history]
        assert losses[9] < losses[0]
        assert losses[-1] < 0.1

    def test_trained_probabilities_separate(self, trained_grounding, rng):
        halves, model = trained_grounding
        pos, neg = [], []
        for gh in halves:
            for rp in gh.replays:
                for s in sample_grounding_pairs(rp, gh.features, rng):
                    (pos if s.label else neg).append(ground_forward(model, s)[0])
        assert np.mean(pos) > 0.8
        assert np.mean(neg) < 0.2

    def test_top_prediction_within_5s_of_event(self, trained_grounding):
        halves, model = trained_grounding
        for gh in halves:
            for rp in gh.replays:
                query = ReplayQuery(rp.game_id, rp.half, rp.replay_start_s,
                                    rp.replay_end_s)
                preds = infer_grounding(model, query, gh.features, stride_s=10)
                top = max(preds, key=lambda p: p.confidence)
                assert abs(top.time_s - rp.event_time_s) <= 5

    def test_seed_determinism(self, tmp_path):
        from spotground.checkpoint import save_model

        halves = _grounding_halves(n_halves=2)
        spec = TrainSpec(mode="ultra", lr=2e-4, epochs=2, batch_size=16,
                         mixup_alpha=0.0, seed=9)
        config = default_grounding_config(16, dropout_p=0.1)
        paths = []
        for name in ("a", "b"):
            model = train_grounding(halves, spec, config=config)
            path = tmp_path / f"{name}.sgckpt"
            save_model(path, model)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_default_hyperparameters(self):
        from spotground.cli import GROUND_TRAIN_DEFAULTS

        assert GROUND_TRAIN_DEFAULTS["lr"] == 2e-4
        assert GROUND_TRAIN_DEFAULTS["epochs"] == 40


class TestInferGrounding:
    def test_stride_five_gives_19_chunks(self):
        model = _zero_ground_model()
        feats = make_features(T=600, D=8)
        preds = infer_grounding(model, ReplayQuery("g0", 1, 300, 310), feats, stride_s=5)
        assert len(preds) == 19

    def test_times_inside_chunk_bounds(self, rng):
        config = default_grounding_config(8, dropout_p=0.0)
        model = Model(KIND_GROUNDING, config, [],
                      init_encoder_params(config, np.random.default_rng(2)))
        feats = make_features(T=600, D=8)
        preds = infer_grounding(model, ReplayQuery("g0", 1, 300, 310), feats, stride_s=5)
        starts = range(180, 271, 5)
        for cs, p in zip(starts, preds):
            assert cs <= p.time_s <= cs + 30

    def test_empty_window(self):
        model = _zero_ground_model()
        feats = make_features(T=100, D=8)
        assert infer_grounding(model, ReplayQuery("g0", 1, 10, 20), feats) == []


class TestFilter:
    def test_threshold_100(self):
        preds = [GroundingPrediction("g", 1, t, 0.5) for t in (90, 150, 210)]
        kept = filter_predictions(preds, 200, 100)
        assert [p.time_s for p in kept] == [150]

    def test_threshold_120_keeps_90(self):
        preds = [GroundingPrediction("g", 1, t, 0.5) for t in (90, 150, 210)]
        kept = filter_predictions(preds, 200, 120)
        assert [p.time_s for p in kept] == [90, 150]

    def test_empty(self):
        assert filter_predictions([], 100, 100) == []

    def test_subset_and_idempotent(self, rng):
        preds = [GroundingPrediction("g", 1, int(t), 0.5)
                 for t in rng.integers(0, 400, 60)]
        once = filter_predictions(preds, 250, 100)
        assert set(p.time_s for p in once) <= set(p.time_s for p in preds)
        assert filter_predictions(once, 250, 100) == once


def _spot(t, conf, label="Goal", game="g", half=1):
    return SpotPrediction(game, half, t, {"Goal": 2, "Foul": 10,
                                          "Shots-off target": 6,
                                          "Corner": 13}[label], label, conf)


def _fuse_oracle(spots, T, W, S, b1, b2, allowed):
    eligible = [p for p in spots
                if p.label in allowed and p.confidence > S and T - W <= p.time_s <= T]
    eligible = sorted(eligible,
                      key=lambda p: (abs(T - p.time_s), p.time_s, -p.confidence,
                                     p.class_index))
    out = []
    for p, b in zip(eligible[:2], (b1, b2)):
        out.append((p.time_s, min(max(b * p.confidence, 0.0), 1.0)))
    return out


class TestFusion:
    def test_worked_example(self):
        T = 500
        spots = [_spot(T - 10, 0.4, "Goal"), _spot(T - 30, 0.6, "Foul")]
        out = fuse_with_spotting(spots, T)
        assert [(p.time_s, p.confidence) for p in out] == [
            (T - 10, 0.5),
            (T - 30, pytest.approx(0.48)),
        ]

    def test_defaults(self):
        import inspect

        sig = inspect.signature(fuse_with_spotting)
        assert sig.parameters["W"].default == 42
        assert sig.parameters["S"].default == 0.02
        assert sig.parameters["beta1"].default == 1.25
        assert sig.parameters["beta2"].default == 0.8

    def test_label_and_score_filtering(self):
        T = 100
        spots = [
            _spot(T - 5, 0.9, "Corner"),  # label not allowed
            _spot(T - 6, 0.01, "Goal"),  # below S
            _spot(T - 50, 0.9, "Goal"),  # outside [T-42, T]
        ]
        assert fuse_with_spotting(spots, T) == []

    def test_confidence_clamped(self):
        T = 100
        out = fuse_with_spotting([_spot(T - 1, 0.9, "Goal")], T)
        assert out[0].confidence == 1.0  # 0.9 * 1.25 clamped

    def test_matches_exhaustive_oracle(self, rng):
        labels = ["Goal", "Foul", "Shots-off target", "Corner"]
        allowed = frozenset({"Foul", "Goal", "Shots-off target"})
        for _ in range(1000):
            T = int(rng.integers(50, 300))
            spots = [
                _spot(int(rng.integers(T - 60, T + 10)),
                      float(rng.integers(0, 101)) / 100.0,
                      labels[int(rng.integers(0, 4))])
                for _ in range(int(rng.integers(0, 12)))
            ]
            got = fuse_with_spotting(spots, T, 42, 0.02, 1.25, 0.8, allowed)
            assert [(p.time_s, p.confidence) for p in got] == _fuse_oracle(
                spots, T, 42, 0.02, 1.25, 0.8, allowed
            )

    def test_invariants(self, rng):
        for _ in range(200):
            T = int(rng.integers(50, 200))
            spots = [_spot(int(rng.integers(T - 60, T)), float(rng.random()), "Goal")
                     for _ in range(8)]
            out = fuse_with_spotting(spots, T)
            assert len(out) <= 2
            for p in out:
                assert T - 42 <= p.time_s <= T
                assert 0.0 <= p.confidence <= 1.0


def _merge_oracle(a, b, window):
    def norm(preds):
        if not preds:
            return []
        confs = [p.confidence for p in preds]
        lo, hi = min(confs), max(confs)
        if hi == lo:
            return [(p.time_s, 1.0) for p in preds]
        return [(p.time_s, (p.confidence - lo) / (hi - lo)) for p in preds]

    pool = norm(a) + norm(b)
    kept = []
    while pool:
        best = max(pool, key=lambda e: (e[1], -e[0]))
        kept.append(best)
        pool = [e for e in pool if abs(e[0] - best[0]) > window]
    return sorted(kept)


class TestMergeNms:
    def test_minmax(self):
        assert minmax_normalize([0.2, 0.6]) == [0.0, 1.0]
        assert minmax_normalize([0.7]) == [1.0]
        assert minmax_normalize([0.3, 0.3]) == [1.0, 1.0]
        assert minmax_normalize([]) == []

    def test_close_pair_keeps_higher(self):
        a = [GroundingPrediction("g", 1, 100, 0.9), GroundingPrediction("g", 1, 50, 0.2)]
        b = [GroundingPrediction("g", 1, 110, 0.6), GroundingPrediction("g", 1, 40, 0.1)]
        out = merge_nms(a, b, 25)
        # after per-source normalization the two sources' tops are both 1.0;
        # 100 vs 110 are within 25 so one survives
        times = [p.time_s for p in out]
        assert 100 in times and 110 not in times

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(1000):
            a = [GroundingPrediction("g", 1, int(rng.integers(0, 200)),
                                     float(rng.integers(0, 100)) / 100.0)
                 for _ in range(int(rng.integers(0, 25)))]
            b = [GroundingPrediction("g", 1, int(rng.integers(0, 200)),
                                     float(rng.integers(0, 100)) / 100.0)
                 for _ in range(int(rng.integers(0, 25)))]
            window = int(rng.integers(1, 40))
            got = [(p.time_s, p.confidence) for p in merge_nms(a, b, window)]
            assert got == pytest.approx(_merge_oracle(a, b, window))

    def test_survivor_gaps(self, rng):
        a = [GroundingPrediction("g", 1, int(t), float(c) / 100.0)
             for t, c in zip(rng.integers(0, 300, 30), rng.integers(0, 100, 30))]
        out = merge_nms(a, [], 25)
        times = sorted(p.time_s for p in out)
        assert all(b - t > 25 for t, b in zip(times, times[1:]))
