"""Stream mixer and the fusion / selection strategies over the three streams.

Batched helpers take stream posteriors as ``(N, 3, 2)`` and HLOs as
``(N, 3, 32)`` arrays, streams ordered (posture, rotation, movement).
"""

from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np

from . import nn
from .nn import ContractError, Network, NetworkSpec, TrainConfig, cross_entropy
from .streams import HLO_DIM, STREAMS, FeatureSet, StreamKind, StreamOutput, init_network

MIXER_DIM = 4 + 64 + 512
MIXER_HIDDEN = 64


class FusionKind(str, Enum):
    POSTERIOR_AVERAGE = "posterior_average"
    POSTERIOR_MIXER = "posterior_mixer"
    HLO_CONCAT = "hlo_concat"
    HLO_MIXER = "hlo_mixer"
    MAX_PROB = "max_prob"
    MIN_PROB = "min_prob"
    UPPER_LIMIT = "upper_limit"


TRAINABLE = (FusionKind.POSTERIOR_MIXER, FusionKind.HLO_CONCAT, FusionKind.HLO_MIXER)


# ---------------------------------------------------------------------------
# mixer


def mixer_input(posture, rotation, movement, raw: bool = False) -> np.ndarray:
    """Concatenate movement summary, rotation and posture features.

    ``movement`` is the (2, T) delta sequence (or a batch of them); by default
    it is reduced to per-channel mean and standard deviation.
    """
    posture, rotation, movement = (np.asarray(a, dtype=float) for a in (posture, rotation, movement))
    single = posture.ndim == 1
    if single:
        posture, rotation, movement = posture[None], rotation[None], movement[None]
    if raw:
        coords = movement.reshape(len(movement), -1)
    else:
        coords = np.concatenate([movement.mean(axis=2), movement.std(axis=2)], axis=1)
    out = np.concatenate([coords, rotation, posture], axis=1)
    return out[0] if single else out


def build_mixer(input_dim: int = MIXER_DIM) -> NetworkSpec:
    return NetworkSpec(
        (nn.normalize([input_dim]), nn.dense(input_dim, MIXER_HIDDEN), nn.relu(),
         nn.dense(MIXER_HIDDEN, len(STREAMS)), nn.softmax())
    )


def build_head(kind: FusionKind | str) -> NetworkSpec:
    kind = FusionKind(kind)
    if kind is FusionKind.HLO_CONCAT:
        n = len(STREAMS) * HLO_DIM
        return NetworkSpec((nn.normalize([n]), nn.dense(n, 32), nn.relu(), nn.dense(32, 2), nn.softmax()))
    if kind is FusionKind.HLO_MIXER:
        return NetworkSpec((nn.dense(HLO_DIM, 16), nn.relu(), nn.dense(16, 2), nn.softmax()))
    raise ContractError(f"{kind.value} has no head network")


def mixer_forward(mixer: Network, x) -> np.ndarray:
    """Simplex weights over (posture, rotation, movement)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != mixer.spec.input_kind[1]:
        raise ContractError(f"mixer input has {x.shape[-1]} dims, expected {mixer.spec.input_kind[1]}")
    weights, _ = mixer.predict(x)
    return weights


# ---------------------------------------------------------------------------
# per-window fusion over StreamOutput triples


def _ordered(outputs: Sequence[StreamOutput]) -> list[StreamOutput]:
    kinds = [StreamKind(o.kind) for o in outputs]
    if sorted(k.value for k in kinds) != sorted(k.value for k in STREAMS) or len(kinds) != 3:
        raise ContractError(f"need exactly one output per stream {[k.value for k in STREAMS]}, got "
                            f"{[k.value for k in kinds]}")
    by_kind = dict(zip(kinds, outputs))
    return [by_kind[k] for k in STREAMS]


def _check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ContractError(f"mixture weights must be a 3-simplex, got {w}")
    return w


def fuse_posterior_average(outputs: Sequence[StreamOutput]) -> np.ndarray:
    posts = np.stack([o.posterior for o in _ordered(outputs)])
    return posts.mean(axis=0)


def fuse_posterior_mixer(outputs: Sequence[StreamOutput], weights) -> np.ndarray:
    posts = np.stack([o.posterior for o in _ordered(outputs)])
    return _check_weights(weights) @ posts


def hlo_concat_input(outputs: Sequence[StreamOutput]) -> np.ndarray:
    return np.concatenate([o.hlo for o in _ordered(outputs)])


def fuse_hlo_concat(outputs: Sequence[StreamOutput], head: Network) -> np.ndarray:
    x = hlo_concat_input(outputs)
    if head.spec.input_kind[1] != x.size:
        raise ContractError(f"head expects {head.spec.input_kind[1]} inputs, concat has {x.size}")
    return head.predict(x)[0]


def fuse_hlo_mixer(outputs: Sequence[StreamOutput], weights, head: Network) -> np.ndarray:
    hlos = np.stack([o.hlo for o in _ordered(outputs)])
    if head.spec.input_kind[1] != hlos.shape[1]:
        raise ContractError(f"head expects {head.spec.input_kind[1]} inputs, HLOs have {hlos.shape[1]}")
    return head.predict(_check_weights(weights) @ hlos)[0]


def _select(outputs, pick_max: bool) -> np.ndarray:
    ordered = _ordered(outputs)
    probs = [o.posterior[1] for o in ordered]
    # first stream in fixed order wins ties
    best = int(np.argmax(probs) if pick_max else np.argmin(probs))
    return ordered[best].posterior


def select_max_prob(outputs: Sequence[StreamOutput]) -> np.ndarray:
    return _select(outputs, True)


def select_min_prob(outputs: Sequence[StreamOutput]) -> np.ndarray:
    return _select(outputs, False)


def upper_limit(outputs: Sequence[StreamOutput], true_label: int) -> np.ndarray:
    return _select(outputs, int(true_label) == 1)


# ---------------------------------------------------------------------------
# batched scores (pre-calving probability per window)


def batch_select(posts: np.ndarray, mode: str, labels=None) -> np.ndarray:
    p1 = posts[:, :, 1]
    if mode == "max":
        return p1.max(axis=1)
    if mode == "min":
        return p1.min(axis=1)
    if mode == "upper":
        labels = np.asarray(labels)
        return np.where(labels == 1, p1.max(axis=1), p1.min(axis=1))
    raise ValueError(mode)


# ---------------------------------------------------------------------------
# trainable fusion models (streams are inputs, never parameters)


def _split(params: dict) -> tuple[dict, dict]:
    mixer = {k[6:]: v for k, v in params.items() if k.startswith("mixer/")}
    head = {k[5:]: v for k, v in params.items() if k.startswith("head/")}
    return mixer, head


class PosteriorMixerModel:
    """Mixer-weighted sum of frozen stream posteriors. Inputs: ``(mixer_x, posts)``."""

    def __init__(self, mixer: Network):
        self.mixer = mixer

    @property
    def params(self) -> dict:
        return {f"mixer/{k}": v for k, v in self.mixer.params.items()}

    def with_params(self, params: dict) -> "PosteriorMixerModel":
        return PosteriorMixerModel(self.mixer.with_params(_split(params)[0]))

    def forward(self, inputs, dtype=np.float64, params=None, keep_cache=False):
        mx, posts = inputs
        mp = None if params is None else _split(params)[0]
        w, _, cache = self.mixer.forward_batch(mx, dtype=dtype, keep_cache=keep_cache, params=mp)
        return np.einsum("bk,bkc->bc", w, posts.astype(dtype)), w, cache

    def loss(self, inputs, labels, dtype=np.float64, params=None) -> float:
        return cross_entropy(self.forward(inputs, dtype, params)[0], labels)[0]

    def loss_and_gradients(self, inputs, labels):
        fused, w, cache = self.forward(inputs, keep_cache=True)
        loss, g = cross_entropy(fused, labels)
        gw = np.einsum("bc,bkc->bk", g, inputs[1])
        grads, _ = self.mixer.backward(cache, w, gw)
        return loss, {f"mixer/{k}": v for k, v in grads.items()}

    def predict(self, inputs) -> tuple[np.ndarray, np.ndarray]:
        fused, w, _ = self.forward(inputs)
        return fused, w


class HLOMixerModel:
    """Head applied to the mixer-weighted sum of frozen stream HLOs. Inputs: ``(mixer_x, hlos)``."""

    def __init__(self, mixer: Network, head: Network):
        self.mixer = mixer
        self.head = head

    @property
    def params(self) -> dict:
        out = {f"mixer/{k}": v for k, v in self.mixer.params.items()}
        out.update({f"head/{k}": v for k, v in self.head.params.items()})
        return out

    def with_params(self, params: dict) -> "HLOMixerModel":
        mp, hp = _split(params)
        return HLOMixerModel(self.mixer.with_params(mp), self.head.with_params(hp))

    def forward(self, inputs, dtype=np.float64, params=None, keep_cache=False):
        mx, hlos = inputs
        mp, hp = (None, None) if params is None else _split(params)
        w, _, mcache = self.mixer.forward_batch(mx, dtype=dtype, keep_cache=keep_cache, params=mp)
        mixed = np.einsum("bk,bkd->bd", w, hlos.astype(dtype))
        out, _, hcache = self.head.forward_batch(mixed, dtype=dtype, keep_cache=keep_cache, params=hp)
        return out, w, (mcache, hcache)

    def loss(self, inputs, labels, dtype=np.float64, params=None) -> float:
        return cross_entropy(self.forward(inputs, dtype, params)[0], labels)[0]

    def loss_and_gradients(self, inputs, labels):
        out, w, (mcache, hcache) = self.forward(inputs, keep_cache=True)
        loss, g = cross_entropy(out, labels)
        hgrads, gmixed = self.head.backward(hcache, out, g)
        gw = np.einsum("bd,bkd->bk", gmixed, inputs[1])
        mgrads, _ = self.mixer.backward(mcache, w, gw)
        grads = {f"mixer/{k}": v for k, v in mgrads.items()}
        grads.update({f"head/{k}": v for k, v in hgrads.items()})
        return loss, grads

    def predict(self, inputs) -> tuple[np.ndarray, np.ndarray]:
        out, w, _ = self.forward(inputs)
        return out, w


class HLOConcatModel:
    """Head on the concatenated HLOs. Inputs: ``hlos`` of shape (N, 3, 32)."""

    def __init__(self, head: Network):
        self.head = head

    @property
    def params(self) -> dict:
        return {f"head/{k}": v for k, v in self.head.params.items()}

    def with_params(self, params: dict) -> "HLOConcatModel":
        return HLOConcatModel(self.head.with_params(_split(params)[1]))

    def loss(self, inputs, labels, dtype=np.float64, params=None) -> float:
        hp = None if params is None else _split(params)[1]
        out, _, _ = self.head.forward_batch(inputs.reshape(len(inputs), -1), dtype=dtype, params=hp)
        return cross_entropy(out, labels)[0]

    def loss_and_gradients(self, inputs, labels):
        loss, grads = self.head.loss_and_gradients(inputs.reshape(len(inputs), -1), labels)
        return loss, {f"head/{k}": v for k, v in grads.items()}

    def predict(self, inputs) -> tuple[np.ndarray, None]:
        return self.head.predict(inputs.reshape(len(inputs), -1))[0], None


# ---------------------------------------------------------------------------
# training with frozen streams


def stream_outputs(streams: dict, feats: FeatureSet, idx=None) -> tuple[np.ndarray, np.ndarray]:
    """Posteriors (N, 3, 2) and HLOs (N, 3, 32) of the three frozen streams."""
    idx = np.arange(len(feats)) if idx is None else np.asarray(idx)
    posts, hlos = [], []
    for kind in STREAMS:
        p, h = streams[kind].predict(feats.stream(kind)[idx])
        posts.append(p)
        hlos.append(h)
    return np.stack(posts, axis=1), np.stack(hlos, axis=1)


def feature_mixer_inputs(feats: FeatureSet, idx=None, raw: bool = False) -> np.ndarray:
    idx = np.arange(len(feats)) if idx is None else np.asarray(idx)
    return mixer_input(feats.posture[idx], feats.rotation[idx], feats.movement[idx], raw=raw)


def fusion_inputs(kind: FusionKind, mixer_x, posts, hlos):
    if kind is FusionKind.POSTERIOR_MIXER:
        return (mixer_x, posts)
    if kind is FusionKind.HLO_MIXER:
        return (mixer_x, hlos)
    return hlos


def build_fusion_model(kind: FusionKind | str, mixer_x_train, hlos_train, seed: int):
    kind = FusionKind(kind)
    rng = np.random.default_rng(seed)
    if kind is FusionKind.POSTERIOR_MIXER:
        return PosteriorMixerModel(init_network(build_mixer(mixer_x_train.shape[1]), mixer_x_train, rng))
    if kind is FusionKind.HLO_MIXER:
        mixer = init_network(build_mixer(mixer_x_train.shape[1]), mixer_x_train, rng)
        return HLOMixerModel(mixer, Network.init(build_head(kind), rng))
    if kind is FusionKind.HLO_CONCAT:
        flat = hlos_train.reshape(len(hlos_train), -1)
        return HLOConcatModel(init_network(build_head(kind), flat, rng))
    return None


def train_fusion(kind: FusionKind | str, streams: dict, feats: FeatureSet, train_idx, val_idx,
                 cfg: TrainConfig, raw_mixer: bool = False):
    """Fit the mixer and/or head on frozen stream outputs.

    Returns ``(model, history)``; both are ``None`` for parameter-free fusions.
    """
    kind = FusionKind(kind)
    if kind not in TRAINABLE:
        return None, None
    train_idx, val_idx = np.asarray(train_idx), np.asarray(val_idx)
    if np.intersect1d(train_idx, val_idx).size:
        raise ContractError("train and validation windows overlap")
    mx = feature_mixer_inputs(feats, raw=raw_mixer)
    posts, hlos = stream_outputs(streams, feats)
    model = build_fusion_model(kind, mx[train_idx], hlos[train_idx], cfg.seed)
    inputs = fusion_inputs(kind, mx, posts, hlos)
    return nn.train(model, (nn.take(inputs, train_idx), feats.labels[train_idx]),
                    (nn.take(inputs, val_idx), feats.labels[val_idx]), cfg)


def model_networks(model) -> dict:
    """Named networks inside a fusion model (for persistence)."""
    out = {}
    if hasattr(model, "mixer"):
        out["mixer"] = model.mixer
    if hasattr(model, "head"):
        out["head"] = model.head
    return out


def model_from_networks(kind: FusionKind | str, nets: dict):
    kind = FusionKind(kind)
    if kind is FusionKind.POSTERIOR_MIXER:
        return PosteriorMixerModel(nets["mixer"])
    if kind is FusionKind.HLO_MIXER:
        return HLOMixerModel(nets["mixer"], nets["head"])
    if kind is FusionKind.HLO_CONCAT:
        return HLOConcatModel(nets["head"])
    return None


def fused_scores(kind: FusionKind | str, model, mixer_x, posts, hlos, labels=None):
    """Pre-calving probability per window and, for mixer fusions, the weights."""
    kind = FusionKind(kind)
    if kind is FusionKind.POSTERIOR_AVERAGE:
        return posts[:, :, 1].mean(axis=1), None
    if kind is FusionKind.MAX_PROB:
        return batch_select(posts, "max"), None
    if kind is FusionKind.MIN_PROB:
        return batch_select(posts, "min"), None
    if kind is FusionKind.UPPER_LIMIT:
        if labels is None:
            raise ContractError("upper_limit needs the true labels")
        return batch_select(posts, "upper", labels), None
    out, w = model.predict(fusion_inputs(kind, mixer_x, posts, hlos))
    return out[:, 1], w
