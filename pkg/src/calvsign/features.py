"""Window-level time-series features: posture pooling, M-measure, movement deltas."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import ContractError
from .synthdata import WINDOW_FRAMES, Segment

KL_FLOOR = 1e-12
DT_MAX = 32


def _anchors(valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest valid frame at or before / at or after each frame (-1 if none)."""
    n = len(valid)
    t = np.arange(n)
    prev = np.maximum.accumulate(np.where(valid, t, -1))
    nxt = np.minimum.accumulate(np.where(valid, t, n)[::-1])[::-1]
    nxt = np.where(nxt == n, -1, nxt)
    return prev, nxt


def _check_mask(values, valid):
    values = np.asarray(values, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    if len(valid) != len(values):
        raise ContractError("mask and sequence lengths differ")
    if not valid.any():
        raise ContractError("cannot interpolate a sequence with no valid frame")
    return values, valid


def interpolate_mean(values, valid) -> np.ndarray:
    """Fill each invalid frame with the mean of its nearest valid neighbours.

    Leading or trailing gaps copy the single available anchor.
    """
    values, valid = _check_mask(values, valid)
    if valid.all():
        return values.copy()
    prev, nxt = _anchors(valid)
    prev = np.where(prev < 0, nxt, prev)
    nxt = np.where(nxt < 0, prev, nxt)
    out = values.copy()
    fill = ~valid
    out[fill] = 0.5 * (values[prev[fill]] + values[nxt[fill]])
    return out


def interpolate_linear(values, valid) -> np.ndarray:
    """Fill invalid frames on the straight line between the nearest valid frames."""
    values, valid = _check_mask(values, valid)
    if valid.all():
        return values.copy()
    prev, nxt = _anchors(valid)
    prev = np.where(prev < 0, nxt, prev)
    nxt = np.where(nxt < 0, prev, nxt)
    out = values.copy()
    fill = np.flatnonzero(~valid)
    a, b = prev[fill], nxt[fill]
    span = (b - a).astype(float)
    frac = np.divide(fill - a, span, out=np.zeros(len(fill)), where=span > 0)
    if values.ndim > 1:
        frac = frac.reshape((-1,) + (1,) * (values.ndim - 1))
    out[fill] = values[a] + frac * (values[b] - values[a])
    return out


def _check_window(window: Segment, window_frames: int) -> None:
    if len(window) != window_frames:
        raise ContractError(f"window has {len(window)} frames, expected {window_frames}")


def pool_max_avg(seq: np.ndarray) -> np.ndarray:
    return np.concatenate([seq.max(axis=0), seq.mean(axis=0)])


def posture_feature(window: Segment, window_frames: int = WINDOW_FRAMES) -> np.ndarray:
    """Temporal max- and average-pooled posture hidden vectors (512-d)."""
    _check_window(window, window_frames)
    hidden = interpolate_mean(window.posture_hidden, window.valid)
    return pool_max_avg(hidden)


def _clamp_simplex(p: np.ndarray) -> np.ndarray:
    p = np.maximum(p, KL_FLOOR)
    return p / p.sum(axis=-1, keepdims=True)


def symmetric_kl(p, q) -> np.ndarray | float:
    """Symmetric KL divergence (natural log) along the last axis."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ContractError(f"dimension mismatch: {p.shape} vs {q.shape}")
    p, q = _clamp_simplex(p), _clamp_simplex(q)
    d = ((p - q) * (np.log(p) - np.log(q))).sum(axis=-1)
    return float(d) if d.ndim == 0 else d


def m_measure(posteriors, dt_max: int = DT_MAX) -> np.ndarray:
    """Mean symmetric KL between posteriors ``dt`` frames apart, for dt = 1..dt_max."""
    p = np.asarray(posteriors, dtype=float)
    if p.ndim != 2:
        raise ContractError("posteriors must be a (T, K) array")
    if len(p) <= dt_max:
        raise ContractError(f"sequence length {len(p)} must exceed dt_max {dt_max}")
    p = _clamp_simplex(p)
    logp = np.log(p)
    out = np.empty(dt_max)
    for dt in range(1, dt_max + 1):
        d = ((p[:-dt] - p[dt:]) * (logp[:-dt] - logp[dt:])).sum(axis=1)
        out[dt - 1] = d.mean()
    return out


def rotation_feature(window: Segment, window_frames: int = WINDOW_FRAMES) -> np.ndarray:
    """M-measure of neck heatmaps followed by that of tail heatmaps (64-d)."""
    _check_window(window, window_frames)
    neck = interpolate_linear(window.neck_heatmap, window.valid)
    tail = interpolate_linear(window.tail_heatmap, window.valid)
    return np.concatenate([m_measure(neck), m_measure(tail)])


def bbox_centres(bbox: np.ndarray) -> np.ndarray:
    return np.stack([bbox[:, 0] + bbox[:, 2] / 2, bbox[:, 1] + bbox[:, 3] / 2], axis=1)


def movement_feature(window: Segment, window_frames: int = WINDOW_FRAMES) -> np.ndarray:
    """Frame-to-frame bounding-box centre deltas, channel-major (2, T), first column zero."""
    _check_window(window, window_frames)
    bbox = interpolate_linear(window.bbox, window.valid)
    if not np.all(np.isfinite(bbox)):
        raise RuntimeError("bounding box missing after interpolation")
    centres = bbox_centres(bbox)
    deltas = np.zeros_like(centres)
    deltas[1:] = np.diff(centres, axis=0)
    return deltas.T.copy()


def dump_features(windows, path) -> Path:
    """One JSON object per window with its three features."""
    path = Path(path)
    with path.open("w") as fh:
        for w in windows:
            fh.write(json.dumps({
                "window_id": w.window_id,
                "cow_id": w.cow_id,
                "label": w.label,
                "posture": posture_feature(w.frames).tolist(),
                "rotation": rotation_feature(w.frames).tolist(),
                "movement": movement_feature(w.frames).tolist(),
            }) + "\n")
    return path
