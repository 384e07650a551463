import json
from dataclasses import replace

import numpy as np
import pytest

from calvsign import synthdata as sd
from calvsign.features import m_measure, movement_feature, posture_feature, rotation_feature
from calvsign.nn import ContractError


@pytest.fixture(scope="module")
def corpus():
    return sd.generate_corpus(seed=3)


def small_config(**profile):
    return sd.CorpusConfig(n_cows=3, segment_hours=1.0, profile=replace(sd.BehaviorProfile(), **profile))


class TestProfile:
    def test_defaults_valid(self):
        sd.BehaviorProfile().validate()

    def test_pre_calving_must_exceed_normal(self):
        bad = replace(sd.BehaviorProfile(), pre_calving=sd.StateRates(0.1, 0.05, 12.0, 0.5, 0.03))
        with pytest.raises(ContractError, match="posture_switch_rate"):
            bad.validate()
        with pytest.raises(ContractError):
            sd.simulate_cow(bad, 0, 10, seed=0)

    def test_probability_ranges(self):
        with pytest.raises(ContractError):
            replace(sd.BehaviorProfile(), interference_prob=1.5).validate()

    def test_dict_round_trip(self):
        prof = replace(sd.BehaviorProfile(), interference_prob=0.3)
        assert sd.BehaviorProfile.from_dict(json.loads(json.dumps(prof.to_dict()))) == prof


class TestSimulateTrace:
    def test_deterministic(self):
        a = sd.simulate_trace(sd.BehaviorProfile(), 1, 400, seed=5)
        b = sd.simulate_trace(sd.BehaviorProfile(), 1, 400, seed=5)
        np.testing.assert_array_equal(a.bbox, b.bbox)
        np.testing.assert_array_equal(a.posture_hidden, b.posture_hidden)

    def test_rejects_empty(self):
        with pytest.raises(ContractError):
            sd.simulate_trace(sd.BehaviorProfile(), 0, 0, seed=0)

    def test_channels_are_valid_distributions(self):
        seg = sd.simulate_trace(sd.BehaviorProfile(), 1, 720, seed=2)
        for arr in (seg.posture_posterior, seg.neck_heatmap, seg.tail_heatmap):
            assert np.all(arr >= 0)
            np.testing.assert_allclose(arr.sum(axis=1), 1.0, atol=1e-9)
        x, y, w, h = seg.bbox.T
        assert np.all((w > 0) & (h > 0))
        assert np.all((x >= 0) & (y >= 0) & (x + w <= 1) & (y + h <= 1))

    def test_posterior_concentrates_on_true_posture(self):
        prof = replace(sd.BehaviorProfile(), garbage_prob=0.0)
        seg = sd.simulate_trace(prof, 1, 720, seed=4)
        truth = seg.hidden["posture"]
        mass = seg.posture_posterior[np.arange(len(truth)), truth]
        assert mass.min() >= 0.7

    def test_no_motion_case(self):
        still = sd.StateRates(0.5, 0.0, 0.0, 0.0, 0.0)
        prof = replace(sd.BehaviorProfile(), normal=still, relocation_rate=0.0, bbox_jitter=0.0,
                       heatmap_glitch_prob=0.0, false_expression_prob=0.0)
        seg = sd.simulate_trace(prof, 0, 360, seed=1)
        centres = seg.bbox[:, :2] + seg.bbox[:, 2:] / 2
        assert np.ptp(centres, axis=0).max() < 1e-12
        assert len(set(seg.neck_heatmap.argmax(axis=1))) == 1

    def test_posture_switch_rate_calibration(self):
        prof = replace(sd.BehaviorProfile(), expression_prob=1.0)
        n = 100 * sd.FRAMES_PER_HOUR
        seg = sd.simulate_trace(prof, 1, n, seed=8)
        rate = seg.hidden["posture_switches"] / 100
        assert abs(rate - prof.pre_calving.posture_switch_rate) <= 0.1 * prof.pre_calving.posture_switch_rate

    def test_hidden_trace_counts_switches(self):
        seg = sd.simulate_trace(sd.BehaviorProfile(), 1, 1080, seed=6)
        lying = seg.hidden["posture"] == 2
        assert np.count_nonzero(np.diff(lying)) == seg.hidden["posture_switches"]

    def test_heatmaps_follow_heading(self):
        prof = replace(sd.BehaviorProfile(), heatmap_glitch_prob=0.0)
        seg = sd.simulate_trace(prof, 1, 360, seed=3)
        cells = np.array(sd.COMPASS_CELLS)
        np.testing.assert_array_equal(seg.neck_heatmap.argmax(1), cells[seg.hidden["heading"]])
        np.testing.assert_array_equal(seg.tail_heatmap.argmax(1), cells[(seg.hidden["heading"] + 4) % 8])

    def test_interference_moves_box_only(self):
        kw = dict(window_frames=180)
        clean = sd.simulate_trace(sd.BehaviorProfile(), 0, 360, seed=9, **kw)
        noisy = sd.simulate_trace(sd.BehaviorProfile(), 0, 360, seed=9, interfered_windows={1}, **kw)
        np.testing.assert_array_equal(clean.posture_hidden, noisy.posture_hidden)
        np.testing.assert_array_equal(clean.posture_posterior, noisy.posture_posterior)
        moved = lambda s: np.abs(np.diff(s.bbox[:, :2], axis=0)).sum(axis=1)
        assert moved(noisy)[180:].sum() > moved(clean)[180:].sum()
        assert noisy.hidden["interfered_windows"] == {1}


class TestFrameDropping:
    def test_zero_rate_is_identity(self):
        seg = sd.simulate_trace(sd.BehaviorProfile(), 0, 360, seed=0)
        out = sd.apply_frame_dropping(seg, 0.0, seed=1)
        assert out.valid.all()
        np.testing.assert_array_equal(out.bbox, seg.bbox)

    def test_binomial_fraction(self):
        seg = sd.simulate_trace(sd.BehaviorProfile(), 0, 10_000, seed=0)
        out = sd.apply_frame_dropping(seg, 0.3, seed=2, window_frames=10_000)
        assert abs((~out.valid).mean() - 0.3) <= 0.02

    def test_endpoints_survive(self):
        seg = sd.simulate_trace(sd.BehaviorProfile(), 0, 900, seed=0)
        out = sd.apply_frame_dropping(seg, 0.95, seed=3)
        ends = np.r_[np.arange(0, 900, 180), np.arange(179, 900, 180)]
        assert out.valid[ends].all()
        assert np.isnan(out.bbox[~out.valid]).all()

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_rate_range(self, rate):
        seg = sd.simulate_trace(sd.BehaviorProfile(), 0, 10, seed=0)
        with pytest.raises(ContractError):
            sd.apply_frame_dropping(seg, rate, seed=0)


class TestCorpus:
    def test_layout(self, corpus):
        assert len(corpus.windows) == 180
        assert corpus.class_counts() == {"normal": 90, "pre_calving": 90}
        assert corpus.cows == list(range(15))

    def test_windows_are_ordered_per_segment(self, corpus):
        for cow in corpus.cows:
            for seg in sd.SEGMENTS:
                starts = [w.start for w in corpus.windows if w.cow_id == cow and w.segment == seg]
                assert starts == [180 * k for k in range(6)]

    def test_same_seed_same_corpus(self):
        a = sd.generate_corpus(small_config(), seed=1)
        b = sd.generate_corpus(small_config(), seed=1)
        for wa, wb in zip(a.windows, b.windows):
            np.testing.assert_array_equal(wa.frames.posture_hidden, wb.frames.posture_hidden)

    def test_signals_separate_classes(self, corpus):
        labels = corpus.labels
        post = np.array([posture_feature(w.frames)[256:] @ np.ones(256) for w in corpus.windows])
        rot = np.array([rotation_feature(w.frames).mean() for w in corpus.windows])
        mov = np.array([np.abs(movement_feature(w.frames)).sum() for w in corpus.windows])
        switches = np.array([np.abs(np.diff(w.frames.posture_posterior[w.frames.valid].argmax(1))).sum()
                             for w in corpus.windows])
        for values in (rot, mov, switches):
            assert values[labels == 1].mean() > values[labels == 0].mean()
        assert np.isfinite(post).all()

    def test_posture_m_measure_higher_before_calving(self, corpus):
        labels = corpus.labels
        m = []
        for w in corpus.windows:
            p = w.frames.posture_posterior[w.frames.valid]
            m.append(m_measure(p).mean())
        m = np.array(m)
        assert m[labels == 1].mean() > m[labels == 0].mean()

    def test_interference_knob(self):
        clean = sd.generate_corpus(small_config(), seed=4)
        noisy = sd.generate_corpus(small_config(interference_prob=1.0), seed=4)
        normal = lambda c: [w for w in c.windows if w.label == 0]
        move = lambda c: np.mean([np.abs(movement_feature(w.frames)).sum() for w in normal(c)])
        assert all(w.interfered for w in normal(noisy))
        assert not any(w.interfered for w in noisy.windows if w.label == 1)
        assert move(noisy) > move(clean)
        for a, b in zip(normal(clean), normal(noisy)):
            np.testing.assert_array_equal(a.frames.valid, b.frames.valid)

    def test_bad_config(self):
        with pytest.raises(ContractError):
            sd.generate_corpus(sd.CorpusConfig(segment_hours=1.1))


class TestCorpusFiles:
    @pytest.fixture
    def written(self, tmp_path):
        corpus = sd.generate_corpus(small_config(interference_prob=0.5), seed=2)
        return corpus, sd.write_corpus(corpus, tmp_path / "c")

    def test_round_trip(self, written):
        corpus, path = written
        back = sd.read_corpus(path)
        assert back.config == corpus.config and back.seed == corpus.seed
        assert len(back.windows) == len(corpus.windows)
        for a, b in zip(corpus.windows, back.windows):
            assert (a.cow_id, a.label, a.start, a.interfered, a.expressed) == \
                   (b.cow_id, b.label, b.start, b.interfered, b.expressed)
            np.testing.assert_array_equal(a.frames.valid, b.frames.valid)
            for name in ("posture_posterior", "posture_hidden", "neck_heatmap", "tail_heatmap", "bbox"):
                np.testing.assert_array_equal(getattr(a.frames, name), getattr(b.frames, name))

    def test_truncated_file_names_line(self, written):
        _, path = written
        f = path / "cow_01.jsonl"
        lines = f.read_text().splitlines()
        f.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(sd.CorpusFormatError, match=f"line {len(lines)}"):
            sd.read_corpus(path)

    def test_malformed_record_names_line(self, written):
        _, path = written
        f = path / "cow_00.jsonl"
        lines = f.read_text().splitlines()
        lines[4] = "{not json"
        f.write_text("\n".join(lines) + "\n")
        with pytest.raises(sd.CorpusFormatError, match="line 5"):
            sd.read_corpus(path)

    def test_schema_version_mismatch(self, written):
        _, path = written
        m = json.loads((path / "manifest.json").read_text())
        m["schema_version"] = 99
        (path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(sd.CorpusFormatError, match="schema version"):
            sd.read_corpus(path)

    def test_index_count_mismatch(self, written):
        _, path = written
        m = json.loads((path / "manifest.json").read_text())
        m["windows"] = m["windows"][:-1]
        (path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(sd.CorpusFormatError, match="window index"):
            sd.read_corpus(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(sd.CorpusFormatError, match="not found"):
            sd.read_corpus(tmp_path)
