import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calvsign import checks
from calvsign import fusion as FU
from calvsign.nn import ContractError, Network, TrainConfig, finite_difference_check
from calvsign.streams import HLO_DIM, STREAMS, StreamKind, StreamOutput, train_stream


def outputs(p_pre, hlos=None, order=STREAMS):
    hlos = np.zeros((3, HLO_DIM)) if hlos is None else hlos
    return [StreamOutput(np.array([1 - p, p]), h, k) for p, h, k in zip(p_pre, hlos, order)]


def random_outputs(rng):
    return outputs(rng.random(3), rng.normal(size=(3, HLO_DIM)))


simplex3 = st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3).filter(lambda v: sum(v) > 1e-3)


class TestMixer:
    def test_input_is_580_wide(self):
        x = FU.mixer_input(np.zeros(512), np.zeros(64), np.zeros((2, 180)))
        assert x.shape == (FU.MIXER_DIM,) == (580,)

    def test_input_layout(self):
        mov = np.vstack([np.full(180, 0.2), np.r_[np.zeros(90), np.ones(90)]])
        x = FU.mixer_input(np.arange(512.0), np.arange(64.0) + 1000, mov)
        np.testing.assert_allclose(x[:4], [0.2, 0.5, 0.0, 0.5], atol=1e-15)
        np.testing.assert_array_equal(x[4:68], np.arange(64.0) + 1000)
        np.testing.assert_array_equal(x[68:], np.arange(512.0))

    def test_raw_mode_keeps_sequence(self):
        x = FU.mixer_input(np.zeros(512), np.zeros(64), np.ones((2, 180)), raw=True)
        assert x.shape == (360 + 64 + 512,)

    def test_zero_mixer_uniform(self):
        w = FU.mixer_forward(Network.zeros(FU.build_mixer()), np.ones(580))
        np.testing.assert_array_equal(w, np.full(3, 1 / 3))

    def test_weights_on_simplex(self):
        rng = np.random.default_rng(0)
        mixer = Network.init(FU.build_mixer(), 1)
        w = FU.mixer_forward(mixer, rng.normal(size=(20, 580)))
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_wrong_width(self):
        with pytest.raises(ContractError):
            FU.mixer_forward(Network.init(FU.build_mixer(), 0), np.ones(579))

    def test_head_shapes(self):
        assert FU.build_head("hlo_concat").input_kind == ("vec", 96)
        assert FU.build_head("hlo_mixer").input_kind == ("vec", 32)
        with pytest.raises(ContractError):
            FU.build_head("posterior_average")


class TestPosteriorFusion:
    def test_average_example(self):
        assert FU.fuse_posterior_average(outputs([0.9, 0.5, 0.1]))[1] == pytest.approx(0.5, abs=1e-15)

    def test_average_of_identical(self):
        np.testing.assert_allclose(FU.fuse_posterior_average(outputs([0.3, 0.3, 0.3])), [0.7, 0.3], rtol=1e-15)

    def test_stream_kinds_checked(self):
        dup = outputs([0.1, 0.2, 0.3], order=(StreamKind.POSTURE, StreamKind.POSTURE, StreamKind.MOVEMENT))
        with pytest.raises(ContractError, match="exactly one"):
            FU.fuse_posterior_average(dup)
        with pytest.raises(ContractError):
            FU.fuse_posterior_average(outputs([0.1, 0.2]))

    def test_input_order_irrelevant(self):
        outs = random_outputs(np.random.default_rng(1))
        np.testing.assert_array_equal(FU.fuse_posterior_average(outs), FU.fuse_posterior_average(outs[::-1]))

    def test_uniform_mixer_is_average(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            outs = random_outputs(rng)
            np.testing.assert_allclose(FU.fuse_posterior_mixer(outs, np.full(3, 1 / 3)),
                                       FU.fuse_posterior_average(outs), rtol=0, atol=1e-12)

    def test_one_hot_selects_exactly(self):
        outs = random_outputs(np.random.default_rng(3))
        for k in range(3):
            np.testing.assert_array_equal(FU.fuse_posterior_mixer(outs, np.eye(3)[k]), outs[k].posterior)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3), simplex3)
    def test_convex(self, probs, raw_w):
        w = np.array(raw_w) / sum(raw_w)
        fused = FU.fuse_posterior_mixer(outputs(probs), w)
        assert min(probs) - 1e-12 <= fused[1] <= max(probs) + 1e-12
        assert abs(fused.sum() - 1) < 1e-12

    def test_weights_must_be_simplex(self):
        with pytest.raises(ContractError):
            FU.fuse_posterior_mixer(outputs([0.1, 0.2, 0.3]), [0.5, 0.6, -0.1])


class TestHLOFusion:
    def test_zero_concat_head_uniform(self):
        head = Network.zeros(FU.build_head("hlo_concat"))
        out = FU.fuse_hlo_concat(random_outputs(np.random.default_rng(0)), head)
        np.testing.assert_array_equal(out, [0.5, 0.5])

    def test_concat_order_contract(self):
        rng = np.random.default_rng(1)
        outs = random_outputs(rng)
        x = FU.hlo_concat_input(outs)
        np.testing.assert_array_equal(x, np.concatenate([o.hlo for o in outs]))
        swapped = [StreamOutput(outs[i].posterior, outs[i].hlo, k) for i, k in zip((1, 0, 2), STREAMS)]
        assert not np.array_equal(FU.hlo_concat_input(swapped), x)

    def test_concat_dimension_checked(self):
        with pytest.raises(ContractError):
            FU.fuse_hlo_concat(random_outputs(np.random.default_rng(0)), Network.zeros(FU.build_head("hlo_mixer")))

    def test_one_hot_mixer_applies_head_to_that_stream(self):
        rng = np.random.default_rng(4)
        head = Network.init(FU.build_head("hlo_mixer"), 0)
        outs = random_outputs(rng)
        for k in range(3):
            np.testing.assert_array_equal(FU.fuse_hlo_mixer(outs, np.eye(3)[k], head), head.predict(outs[k].hlo)[0])

    def test_identical_hlos(self):
        h = np.random.default_rng(5).normal(size=HLO_DIM)
        head = Network.init(FU.build_head("hlo_mixer"), 1)
        outs = outputs([0.2, 0.4, 0.6], np.tile(h, (3, 1)))
        np.testing.assert_allclose(FU.fuse_hlo_mixer(outs, np.full(3, 1 / 3), head), head.predict(h)[0],
                                   rtol=1e-12)

    def test_composite_gradient_reaches_mixer(self):
        rng = np.random.default_rng(6)
        model, x, y = checks.gradient_case("hlo_mixer", rng)
        assert finite_difference_check(model, x, y) < 1e-4
        _, grads = model.loss_and_gradients(x, y)
        assert any(np.abs(g).max() > 0 for k, g in grads.items() if k.startswith("mixer/"))

    def test_full_size_composite_gradient(self):
        rng = np.random.default_rng(7)
        mixer = Network.init(FU.build_mixer(12), rng)
        mixer = mixer.with_params({k: rng.normal(0, 0.3, v.shape) for k, v in mixer.params.items()})
        head = Network.init(FU.build_head("hlo_mixer"), rng)
        head = head.with_params({k: rng.normal(0, 0.3, v.shape) for k, v in head.params.items()})
        x = (rng.normal(size=(4, 12)), rng.normal(size=(4, 3, HLO_DIM)))
        assert finite_difference_check(FU.HLOMixerModel(mixer, head), x, [0, 1, 1, 0]) < 1e-4


class TestSelection:
    def test_examples(self):
        outs = outputs([0.9, 0.5, 0.1])
        assert FU.select_max_prob(outs)[1] == 0.9
        assert FU.select_min_prob(outs)[1] == 0.1
        assert FU.upper_limit(outs, 1)[1] == 0.9
        assert FU.upper_limit(outs, 0)[1] == 0.1

    def test_ties_pick_first_stream(self):
        outs = outputs([0.4, 0.4, 0.4], np.arange(3)[:, None] * np.ones((3, HLO_DIM)))
        assert FU.select_max_prob(outs) is outs[0].posterior
        assert FU.select_min_prob(outs) is outs[0].posterior

    def test_max_dominates_average(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            outs = random_outputs(rng)
            assert FU.select_max_prob(outs)[1] >= FU.fuse_posterior_average(outs)[1]

    def test_batch_matches_per_window(self):
        rng = np.random.default_rng(9)
        posts = rng.dirichlet([1, 1], size=(30, 3))
        labels = rng.integers(0, 2, 30)
        for mode, fn in (("max", FU.select_max_prob), ("min", FU.select_min_prob)):
            expected = [fn(outputs(p[:, 1]))[1] for p in posts]
            np.testing.assert_array_equal(FU.batch_select(posts, mode), expected)
        expected = [FU.upper_limit(outputs(p[:, 1]), y)[1] for p, y in zip(posts, labels)]
        np.testing.assert_array_equal(FU.batch_select(posts, "upper", labels), expected)

    def test_upper_limit_needs_labels(self):
        posts = np.full((2, 3, 2), 0.5)
        with pytest.raises(ContractError):
            FU.fused_scores("upper_limit", None, None, posts, None)


@pytest.fixture(scope="module")
def frozen(tiny_feats):
    tr = np.flatnonzero(tiny_feats.cow_ids < 2)
    va = np.flatnonzero(tiny_feats.cow_ids == 2)
    cfg = TrainConfig(max_epochs=2, seed=0)
    streams = {k: train_stream(k, tiny_feats, tr, va, cfg)[0] for k in STREAMS}
    return streams, tr, va


class TestTrainFusion:
    def test_parameter_free_kinds(self, frozen, tiny_feats):
        streams, tr, va = frozen
        for kind in ("posterior_average", "max_prob", "min_prob", "upper_limit"):
            assert FU.train_fusion(kind, streams, tiny_feats, tr, va, TrainConfig()) == (None, None)

    @pytest.mark.parametrize("kind", ["posterior_mixer", "hlo_concat", "hlo_mixer"])
    def test_streams_stay_frozen(self, frozen, tiny_feats, kind):
        streams, tr, va = frozen
        before = {k: n.fingerprint() for k, n in streams.items()}
        model, hist = FU.train_fusion(kind, streams, tiny_feats, tr, va, TrainConfig(max_epochs=3, seed=1))
        assert {k: n.fingerprint() for k, n in streams.items()} == before
        assert not any(k.startswith(("posture", "rotation", "movement")) for k in model.params)
        assert len(hist.val_loss) >= 1
        mx = FU.feature_mixer_inputs(tiny_feats, va)
        posts, hlos = FU.stream_outputs(streams, tiny_feats, va)
        scores, w = FU.fused_scores(kind, model, mx, posts, hlos)
        assert np.all((scores >= 0) & (scores <= 1))
        assert (w is None) == (kind == "hlo_concat")

    def test_model_networks_round_trip(self, frozen, tiny_feats):
        streams, tr, va = frozen
        model, _ = FU.train_fusion("hlo_mixer", streams, tiny_feats, tr, va, TrainConfig(max_epochs=1))
        back = FU.model_from_networks("hlo_mixer", FU.model_networks(model))
        x = FU.fusion_inputs(FU.FusionKind.HLO_MIXER, FU.feature_mixer_inputs(tiny_feats, va),
                             *FU.stream_outputs(streams, tiny_feats, va))
        np.testing.assert_array_equal(back.predict(x)[0], model.predict(x)[0])
