"""Single-stream calving-sign identifiers and the generic-feature (E2E) baseline."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import features as F
from . import nn
from .nn import ContractError, Network, NetworkSpec, TrainConfig
from .synthdata import WINDOW_FRAMES, Corpus, Segment

HLO_DIM = 32
E2E_SEED = 2017
E2E_DIM = 256
RAW_CHANNELS = 4 + 9 + 9 + 4


class StreamKind(str, Enum):
    POSTURE = "posture"
    ROTATION = "rotation"
    MOVEMENT = "movement"
    E2E = "e2e"


STREAMS = (StreamKind.POSTURE, StreamKind.ROTATION, StreamKind.MOVEMENT)

# posture-like streams pool hidden vectors (mean-value fill); the rest use linear fill
INTERPOLATION = {
    StreamKind.POSTURE: "mean",
    StreamKind.E2E: "mean",
    StreamKind.ROTATION: "linear",
    StreamKind.MOVEMENT: "linear",
}


@dataclass(frozen=True)
class StreamOutput:
    posterior: np.ndarray  # index 1 = pre-calving
    hlo: np.ndarray
    kind: StreamKind

    @property
    def p_pre(self) -> float:
        return float(self.posterior[1])


def _dense_stream(n_in: int) -> NetworkSpec:
    return NetworkSpec(
        (nn.normalize([n_in]), nn.dense(n_in, 64), nn.relu(), nn.dense(64, HLO_DIM), nn.relu(),
         nn.dense(HLO_DIM, 2), nn.softmax()),
        hlo_tap=4,
    )


def build_stream(kind: StreamKind | str) -> NetworkSpec:
    kind = StreamKind(kind)
    if kind in (StreamKind.POSTURE, StreamKind.E2E):
        return _dense_stream(512)
    if kind is StreamKind.ROTATION:
        return _dense_stream(2 * F.DT_MAX)
    return NetworkSpec(
        (nn.normalize([2, 1]), nn.conv1d(2, 16, 5), nn.relu(), nn.conv1d(16, 32, 5), nn.relu(), nn.gap(),
         nn.dense(32, HLO_DIM), nn.relu(), nn.dense(HLO_DIM, 2), nn.softmax()),
        hlo_tap=7,
    )


def stream_predict(net: Network, feature, kind: StreamKind | str) -> StreamOutput:
    post, hlo = net.predict(feature)
    if post.ndim != 1:
        raise ContractError("stream_predict takes a single window feature")
    return StreamOutput(post, hlo, StreamKind(kind))


def e2e_projection(seed: int = E2E_SEED) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(RAW_CHANNELS), size=(RAW_CHANNELS, E2E_DIM))


def raw_channels(window: Segment) -> np.ndarray:
    return np.concatenate(
        [window.posture_posterior, window.neck_heatmap, window.tail_heatmap, window.bbox], axis=1
    )


def e2e_feature(window: Segment, projection: np.ndarray | None = None) -> np.ndarray:
    """Generic stand-in feature: fixed random projection of raw channels, max+avg pooled."""
    proj = e2e_projection() if projection is None else projection
    raw = F.interpolate_mean(raw_channels(window), window.valid)
    return F.pool_max_avg(raw @ proj)


@dataclass
class FeatureSet:
    """Per-window features for a whole corpus, aligned by row."""

    posture: np.ndarray  # (N, 512)
    rotation: np.ndarray  # (N, 64)
    movement: np.ndarray  # (N, 2, 180)
    e2e: np.ndarray  # (N, 512)
    labels: np.ndarray
    cow_ids: np.ndarray
    window_ids: np.ndarray
    interfered: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def stream(self, kind: StreamKind | str) -> np.ndarray:
        return getattr(self, StreamKind(kind).value)

    def with_labels(self, labels) -> "FeatureSet":
        return FeatureSet(self.posture, self.rotation, self.movement, self.e2e, np.asarray(labels, dtype=int),
                          self.cow_ids, self.window_ids, self.interfered)


def featurize(corpus: Corpus, e2e_seed: int = E2E_SEED) -> FeatureSet:
    proj = e2e_projection(e2e_seed)
    wf = corpus.config.window_frames
    ws = corpus.windows
    return FeatureSet(
        posture=np.array([F.posture_feature(w.frames, wf) for w in ws]),
        rotation=np.array([F.rotation_feature(w.frames, wf) for w in ws]),
        movement=np.array([F.movement_feature(w.frames, wf) for w in ws]),
        e2e=np.array([e2e_feature(w.frames, proj) for w in ws]),
        labels=np.array([w.label for w in ws], dtype=int),
        cow_ids=np.array([w.cow_id for w in ws], dtype=int),
        window_ids=np.array([w.window_id for w in ws], dtype=int),
        interfered=np.array([w.interfered for w in ws], dtype=bool),
    )


def fit_normalizer(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension centre and scale of a training set.

    Sequences (N, C, T) are scaled per channel with the median and the
    normal-consistent median absolute deviation: movement deltas are mostly
    tracking jitter with rare large steps, and the standard deviation would be
    set by those steps and squash the jitter-level structure.
    """
    if x.ndim == 3:
        flat = np.moveaxis(x, 1, 0).reshape(x.shape[1], -1)
        mean = np.median(flat, axis=1)
        scale = 1.4826 * np.median(np.abs(flat - mean[:, None]), axis=1)
        mean, scale = mean[:, None], scale[:, None]
    else:
        mean, scale = x.mean(axis=0), x.std(axis=0)
    scale = np.where(scale > 1e-8, scale, 1.0)
    return mean, scale


def init_network(spec: NetworkSpec, train_x: np.ndarray, seed: int) -> Network:
    net = Network.init(spec, seed)
    if spec.layers[0]["type"] == "normalize":
        net = net.with_normalizer(0, *fit_normalizer(train_x))
    return net


def train_stream(kind: StreamKind | str, feats: FeatureSet, train_idx, val_idx, cfg: TrainConfig):
    """Train one identifier on ``feats`` rows; returns ``(network, history)``."""
    kind = StreamKind(kind)
    train_idx, val_idx = np.asarray(train_idx), np.asarray(val_idx)
    if np.intersect1d(train_idx, val_idx).size:
        raise ContractError("train and validation windows overlap")
    x = feats.stream(kind)
    net = init_network(build_stream(kind), x[train_idx], cfg.seed)
    return nn.train(net, (x[train_idx], feats.labels[train_idx]), (x[val_idx], feats.labels[val_idx]), cfg)


def predict_outputs(net: Network, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched posteriors (N, 2) and HLOs (N, 32)."""
    return net.predict(x)
