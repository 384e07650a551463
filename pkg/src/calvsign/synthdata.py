"""Virtual-cow simulator producing frame-level features for labelled windows.

A per-frame hidden state machine (posture, tail, heading, walking bout, pen
position) drives every emitted channel, so the posture posterior, the
neck/tail heatmaps and the bounding box stay mutually consistent. Each
30-minute window of the pre-calving segment expresses each behavioural sign
(posture restlessness, rotation, walking) independently with
``expression_prob``; unexpressed signs fall back to normal-state rates.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .nn import ContractError

SCHEMA_VERSION = 1
FRAMES_PER_HOUR = 360  # 0.1 fps
WINDOW_FRAMES = 180
HIDDEN_DIM = 256
POSTURE_CLASSES = ("standing_tail_raised", "standing", "lying", "garbage")
SEGMENTS = ("normal", "pre_calving")
SIGNS = ("posture", "rotation", "walking")

# boundary cells of the 3x3 grid (row-major index) for headings E, NE, N, ... SE
COMPASS_CELLS = (5, 2, 1, 0, 3, 6, 7, 8)
HEADING_VECTORS = np.array(
    [(math.cos(k * math.pi / 4), -math.sin(k * math.pi / 4)) for k in range(8)]
)

PEN_LO, PEN_HI = 0.2, 0.8
MEAN_WALK_BOUT = 6.0  # frames


class CorpusFormatError(ValueError):
    """Malformed or inconsistent corpus files."""


@dataclass(frozen=True)
class StateRates:
    posture_switch_rate: float  # lying<->standing toggles per hour
    tail_raise_prob: float  # per standing frame
    rotation_rate: float  # heading changes per hour
    walk_fraction: float  # share of standing frames spent walking
    walk_speed: float  # normalised image units per frame


@dataclass(frozen=True)
class BehaviorProfile:
    normal: StateRates = StateRates(0.5, 0.03, 3.0, 0.03, 0.010)
    pre_calving: StateRates = StateRates(8.0, 0.05, 12.0, 0.50, 0.030)
    expression_prob: float = 0.8
    false_expression_prob: float = 0.05
    relocation_rate: float = 0.5  # state-independent repositioning moves per hour
    transition_frames: int = 8  # frames of intermediate hidden vector after a posture switch
    reversal_prob: float = 1.0  # share of heading changes that are 180-degree turns
    heatmap_noise: float = 0.5  # Dirichlet concentration of the off-peak mass
    heatmap_glitch_prob: float = 0.05  # frames whose heatmap peak lands on a random cell
    hidden_noise: float = 0.7
    bbox_jitter: float = 0.0015
    garbage_prob: float = 0.05
    interference_prob: float = 0.0  # share of normal windows where tracking drifts to a neighbour

    def validate(self) -> None:
        for name in StateRates.__dataclass_fields__:
            lo, hi = getattr(self.normal, name), getattr(self.pre_calving, name)
            if lo < 0:
                raise ContractError(f"{name} must be non-negative")
            if not hi > lo:
                raise ContractError(f"pre-calving {name} ({hi}) must exceed normal ({lo})")
        for name in ("tail_raise_prob", "walk_fraction"):
            if getattr(self.pre_calving, name) >= 1:
                raise ContractError(f"{name} must be < 1")
        for name in ("expression_prob", "false_expression_prob", "garbage_prob", "interference_prob",
                     "reversal_prob", "heatmap_glitch_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ContractError(f"{name} must lie in [0, 1]")
        if self.relocation_rate < 0 or self.transition_frames < 0:
            raise ContractError("relocation_rate and transition_frames must be non-negative")
        if self.heatmap_noise <= 0 or self.hidden_noise < 0 or self.bbox_jitter < 0:
            raise ContractError("noise scales must be non-negative (heatmap_noise > 0)")

    def rates(self, state: int) -> StateRates:
        return self.pre_calving if state == 1 else self.normal

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorProfile":
        d = dict(d)
        for key in ("normal", "pre_calving"):
            if key in d:
                d[key] = StateRates(**d[key])
        return cls(**d)


@dataclass(frozen=True)
class FrameFeature:
    t: int
    posture_posterior: np.ndarray | None
    posture_hidden: np.ndarray | None
    neck_heatmap: np.ndarray | None
    tail_heatmap: np.ndarray | None
    bbox: tuple | None
    valid: bool


@dataclass
class Segment:
    """Arrays for consecutive frames plus the hidden trace that produced them."""

    posture_posterior: np.ndarray  # (T, 4)
    posture_hidden: np.ndarray  # (T, 256)
    neck_heatmap: np.ndarray  # (T, 9)
    tail_heatmap: np.ndarray  # (T, 9)
    bbox: np.ndarray  # (T, 4) x, y, w, h
    valid: np.ndarray  # (T,) bool
    hidden: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.valid)

    def frame(self, t: int) -> FrameFeature:
        if not self.valid[t]:
            return FrameFeature(t, None, None, None, None, None, False)
        return FrameFeature(
            t,
            self.posture_posterior[t],
            self.posture_hidden[t],
            self.neck_heatmap[t],
            self.tail_heatmap[t],
            tuple(float(v) for v in self.bbox[t]),
            True,
        )

    def frames(self) -> list[FrameFeature]:
        return [self.frame(t) for t in range(len(self))]

    def slice(self, start: int, stop: int) -> "Segment":
        return Segment(
            self.posture_posterior[start:stop].copy(),
            self.posture_hidden[start:stop].copy(),
            self.neck_heatmap[start:stop].copy(),
            self.tail_heatmap[start:stop].copy(),
            self.bbox[start:stop].copy(),
            self.valid[start:stop].copy(),
        )


def posture_prototypes(seed: int = 7, dim: int = HIDDEN_DIM) -> np.ndarray:
    """One hidden-space prototype per posture class plus a final row for posture transitions."""
    return np.random.default_rng(seed).normal(0.0, 1.0, size=(len(POSTURE_CLASSES) + 1, dim))


def _peaked_simplex(rng, k: int, peak: int, lo: float, hi: float, conc: float) -> np.ndarray:
    mass = rng.uniform(lo, hi)
    rest = rng.dirichlet(np.full(k, conc))
    p = (1.0 - mass) * rest
    p[peak] += mass
    return p / p.sum()


def simulate_trace(
    profile: BehaviorProfile,
    state: int,
    n_frames: int,
    seed,
    *,
    window_frames: int = WINDOW_FRAMES,
    prototypes: np.ndarray | None = None,
    start_position: tuple | None = None,
    interfered_windows: set | None = None,
) -> Segment:
    """Simulate ``n_frames`` of one cow in ``state`` (0 normal, 1 pre-calving).

    The returned :class:`Segment` carries the hidden trace in ``.hidden``:
    posture, tail, heading, walking, centre, per-window expressed signs and the
    number of posture switches.
    """
    profile.validate()
    if n_frames < 1:
        raise ContractError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    protos = posture_prototypes() if prototypes is None else prototypes
    base, high = profile.normal, profile.pre_calving
    n_windows = math.ceil(n_frames / window_frames)
    p_express = profile.expression_prob if state == 1 else profile.false_expression_prob
    expressed = rng.random((n_windows, len(SIGNS))) < p_express

    lying = bool(rng.random() < 0.5)
    heading = int(rng.integers(8))
    walking = False
    if start_position is None:
        centre = rng.uniform(PEN_LO + 0.1, PEN_HI - 0.1, size=2)
    else:
        centre = np.array(start_position, dtype=float)

    posture = np.empty(n_frames, dtype=int)
    tail = np.zeros(n_frames, dtype=bool)
    headings = np.empty(n_frames, dtype=int)
    walk = np.zeros(n_frames, dtype=bool)
    centres = np.empty((n_frames, 2))
    transition = np.zeros(n_frames, dtype=bool)
    switches = 0
    turns = 0
    relocation: list = []  # remaining waypoints of a repositioning move
    for t in range(n_frames):
        sign = expressed[t // window_frames]
        r_post = high if sign[0] else base
        r_rot = high if sign[1] else base
        r_walk = high if sign[2] else base
        if t > 0 and rng.random() < r_post.posture_switch_rate / FRAMES_PER_HOUR:
            lying = not lying
            switches += 1
            transition[t:t + profile.transition_frames] = True
        if rng.random() < r_rot.rotation_rate / FRAMES_PER_HOUR:
            if rng.random() < profile.reversal_prob:
                heading = (heading + 4) % 8
            else:
                heading = (heading + int(rng.choice([-2, -1, 1, 2]))) % 8
            turns += 1
        if not relocation and rng.random() < profile.relocation_rate / FRAMES_PER_HOUR:
            target = rng.uniform(PEN_LO, PEN_HI, size=2)
            steps = int(rng.integers(6, 11))
            relocation = [centre + (target - centre) * k / steps for k in range(1, steps + 1)]
        if lying:
            walking = False
        else:
            stay = 1.0 - 1.0 / MEAN_WALK_BOUT
            f = r_walk.walk_fraction
            start = f * (1.0 - stay) / (1.0 - f) if f < 1 else 1.0
            walking = rng.random() < (stay if walking else start)
        if relocation:
            centre = relocation.pop(0)
        elif walking:
            step = centre + r_walk.walk_speed * HEADING_VECTORS[heading]
            if np.any(step < PEN_LO) or np.any(step > PEN_HI):
                # turn around at the pen wall
                heading = (heading + 4) % 8
                step = centre + r_walk.walk_speed * HEADING_VECTORS[heading]
            centre = np.clip(step, PEN_LO, PEN_HI)
        posture[t] = 2 if lying else 1
        tail[t] = (not lying) and rng.random() < r_post.tail_raise_prob
        if tail[t]:
            posture[t] = 0
        headings[t] = heading
        walk[t] = walking
        centres[t] = centre

    observed = posture.copy()
    observed[rng.random(n_frames) < profile.garbage_prob] = 3
    post = np.stack([_peaked_simplex(rng, 4, c, 0.7, 0.95, 1.0) for c in observed])
    proto_rows = np.where(transition & (observed != 3), len(POSTURE_CLASSES), observed)
    hidden = protos[proto_rows] + rng.normal(0.0, profile.hidden_noise, size=(n_frames, protos.shape[1]))
    hidden = np.round(hidden, 4)
    neck_cells = np.array(COMPASS_CELLS)[headings]
    tail_cells = np.array(COMPASS_CELLS)[(headings + 4) % 8]
    for cells in (neck_cells, tail_cells):
        glitch = rng.random(n_frames) < profile.heatmap_glitch_prob
        cells[glitch] = rng.integers(9, size=int(glitch.sum()))
    neck = np.stack([_peaked_simplex(rng, 9, c, 0.6, 0.9, profile.heatmap_noise) for c in neck_cells])
    tailmap = np.stack([_peaked_simplex(rng, 9, c, 0.6, 0.9, profile.heatmap_noise) for c in tail_cells])

    track = centres.copy()
    interfered = set()
    if interfered_windows:
        for w in sorted(interfered_windows):
            lo, hi = w * window_frames, min((w + 1) * window_frames, n_frames)
            _neighbour_drift(rng, track, lo, hi, high.walk_speed)
            interfered.add(w)

    size = np.where(posture[:, None] == 2, [0.15, 0.11], [0.16, 0.16])
    jitter = rng.normal(0.0, profile.bbox_jitter, size=(n_frames, 4))
    cx, cy = track[:, 0] + jitter[:, 0], track[:, 1] + jitter[:, 1]
    w = np.clip(size[:, 0] + 0.2 * jitter[:, 2], 0.05, 0.3)
    h = np.clip(size[:, 1] + 0.2 * jitter[:, 3], 0.05, 0.3)
    x = np.clip(cx - w / 2, 0.0, 1.0 - w)
    y = np.clip(cy - h / 2, 0.0, 1.0 - h)
    bbox = np.stack([x, y, w, h], axis=1)

    seg = Segment(post, hidden, neck, tailmap, bbox, np.ones(n_frames, dtype=bool))
    seg.hidden = {
        "posture": posture,
        "tail_raised": tail,
        "heading": headings,
        "walking": walk,
        "centre": centres,
        "expressed": expressed,
        "transition": transition,
        "posture_switches": switches,
        "turns": turns,
        "interfered_windows": interfered,
    }
    return seg


def _neighbour_drift(rng, track: np.ndarray, lo: int, hi: int, speed: float) -> None:
    """Overwrite short stretches of ``track[lo:hi]`` with a nearby walking neighbour's centre.

    The tracker latches onto an adjacent cow, so each stretch starts close to
    the true position and then moves at walking speed.
    """
    for _ in range(int(rng.integers(3, 7))):
        length = int(rng.integers(4, 11))
        start = int(rng.integers(lo + 1, max(lo + 2, hi - length - 1)))
        stop = min(start + length, hi - 1)
        pos = np.clip(track[start] + rng.normal(0.0, 0.01, size=2), PEN_LO, PEN_HI)
        heading = int(rng.integers(8))
        for t in range(start, stop):
            step = pos + speed * HEADING_VECTORS[heading]
            if np.any(step < PEN_LO) or np.any(step > PEN_HI):
                heading = (heading + 4) % 8
                step = pos + speed * HEADING_VECTORS[heading]
            pos = np.clip(step, PEN_LO, PEN_HI)
            track[t] = pos


def simulate_cow(profile: BehaviorProfile, state: int, n_frames: int, seed, **kwargs) -> list[FrameFeature]:
    return simulate_trace(profile, state, n_frames, seed, **kwargs).frames()


def apply_frame_dropping(seg: Segment, drop_rate: float, seed, window_frames: int = WINDOW_FRAMES) -> Segment:
    """Invalidate frames independently with ``drop_rate``; window endpoints are kept."""
    if not 0 <= drop_rate < 1:
        raise ContractError("drop_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    n = len(seg)
    drop = rng.random(n) < drop_rate
    t = np.arange(n)
    drop &= (t % window_frames != 0) & (t % window_frames != window_frames - 1) & (t != n - 1)
    out = Segment(seg.posture_posterior.copy(), seg.posture_hidden.copy(), seg.neck_heatmap.copy(),
                  seg.tail_heatmap.copy(), seg.bbox.copy(), seg.valid & ~drop, dict(seg.hidden))
    for arr in (out.posture_posterior, out.posture_hidden, out.neck_heatmap, out.tail_heatmap, out.bbox):
        arr[~out.valid] = np.nan
    return out


# ---------------------------------------------------------------------------
# corpus


@dataclass
class WindowSample:
    window_id: int
    cow_id: int
    label: int
    segment: str
    start: int  # first frame index within the segment
    frames: Segment
    interfered: bool = False
    expressed: tuple = ()

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class CorpusConfig:
    n_cows: int = 15
    segment_hours: float = 3.0
    window_frames: int = WINDOW_FRAMES
    drop_rate: float = 0.15
    cow_jitter: float = 0.2
    prototype_seed: int = 7
    profile: BehaviorProfile = BehaviorProfile()

    @property
    def segment_frames(self) -> int:
        return int(round(self.segment_hours * FRAMES_PER_HOUR))

    def validate(self) -> None:
        self.profile.validate()
        if self.n_cows < 1:
            raise ContractError("n_cows must be >= 1")
        if self.segment_frames % self.window_frames:
            raise ContractError("segment length must be a whole number of windows")
        if not 0 <= self.drop_rate < 1:
            raise ContractError("drop_rate must lie in [0, 1)")
        if self.cow_jitter < 0:
            raise ContractError("cow_jitter must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile"] = self.profile.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        if "profile" in d:
            d["profile"] = BehaviorProfile.from_dict(d["profile"])
        return cls(**d)


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    windows: list

    @property
    def cows(self) -> list[int]:
        return sorted({w.cow_id for w in self.windows})

    @property
    def labels(self) -> np.ndarray:
        return np.array([w.label for w in self.windows], dtype=int)

    def class_counts(self) -> dict:
        labels = self.labels
        return {"normal": int((labels == 0).sum()), "pre_calving": int((labels == 1).sum())}


def cow_profile(base: BehaviorProfile, jitter: float, rng) -> BehaviorProfile:
    """Scale each sign's rates by one per-cow factor (ordering between states is kept)."""
    if jitter == 0:
        return base
    f = np.exp(rng.normal(0.0, jitter, size=4))

    def scale(r: StateRates) -> StateRates:
        return StateRates(
            r.posture_switch_rate * f[0],
            min(r.tail_raise_prob * f[0], 0.9),
            r.rotation_rate * f[1],
            min(r.walk_fraction * f[2], 0.9),
            r.walk_speed * f[3],
        )

    return replace(base, normal=scale(base.normal), pre_calving=scale(base.pre_calving))


def generate_corpus(cfg: CorpusConfig = CorpusConfig(), seed: int = 0) -> Corpus:
    cfg.validate()
    n_frames = cfg.segment_frames
    per_segment = n_frames // cfg.window_frames
    protos = posture_prototypes(cfg.prototype_seed)
    cow_seeds = np.random.SeedSequence(seed).spawn(cfg.n_cows)
    windows = []
    for cow, ss in enumerate(cow_seeds):
        cow_ss, *seg_ss = ss.spawn(1 + 2 * len(SEGMENTS))
        cow_rng = np.random.default_rng(cow_ss)
        profile = cow_profile(cfg.profile, cfg.cow_jitter, cow_rng)
        start_pos = cow_rng.uniform(PEN_LO + 0.1, PEN_HI - 0.1, size=2)
        for label, name in enumerate(SEGMENTS):
            sim_ss, drop_ss = seg_ss[2 * label], seg_ss[2 * label + 1]
            sim_rng = np.random.default_rng(sim_ss)
            corrupt = set()
            if label == 0 and profile.interference_prob > 0:
                corrupt = {w for w in range(per_segment) if sim_rng.random() < profile.interference_prob}
            seg = simulate_trace(profile, label, n_frames, sim_rng, window_frames=cfg.window_frames,
                                 prototypes=protos, start_position=start_pos, interfered_windows=corrupt)
            seg = apply_frame_dropping(seg, cfg.drop_rate, drop_ss, cfg.window_frames)
            for k in range(per_segment):
                lo = k * cfg.window_frames
                windows.append(WindowSample(
                    window_id=len(windows),
                    cow_id=cow,
                    label=label,
                    segment=name,
                    start=lo,
                    frames=seg.slice(lo, lo + cfg.window_frames),
                    interfered=k in corrupt,
                    expressed=tuple(bool(v) for v in seg.hidden["expressed"][k]),
                ))
    return Corpus(cfg, seed, windows)


# ---------------------------------------------------------------------------
# persistence

_ARRAY_FIELDS = ("posture_posterior", "posture_hidden", "neck_heatmap", "tail_heatmap", "bbox")


def _record(cow: int, segment: str, t: int, seg: Segment, i: int) -> dict:
    rec = {"cow": cow, "segment": segment, "t": t, "valid": bool(seg.valid[i])}
    for name in _ARRAY_FIELDS:
        rec[name] = getattr(seg, name)[i].tolist() if seg.valid[i] else None
    return rec


def write_corpus(corpus: Corpus, path) -> Path:
    """Write ``manifest.json`` plus one JSON-lines record file per cow under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    files = {}
    for w in corpus.windows:
        name = f"cow_{w.cow_id:02d}.jsonl"
        lines = files.setdefault(name, [])
        index.append({
            "window_id": w.window_id,
            "cow_id": w.cow_id,
            "label": w.label,
            "segment": w.segment,
            "start": w.start,
            "n_frames": w.n_frames,
            "file": name,
            "first_line": len(lines) + 1,
            "interfered": w.interfered,
            "expressed": list(w.expressed),
        })
        for i in range(w.n_frames):
            lines.append(json.dumps(_record(w.cow_id, w.segment, w.start + i, w.frames, i)))
    for name, lines in files.items():
        (root / name).write_text("\n".join(lines) + "\n")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": corpus.seed,
        "config": corpus.config.to_dict(),
        "frame_rate_fps": FRAMES_PER_HOUR / 3600,
        "window_frames": corpus.config.window_frames,
        "cows": corpus.cows,
        "files": {name: len(lines) for name, lines in sorted(files.items())},
        "windows": index,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def _parse_record(line: str, where: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{where}: malformed record ({exc.msg})") from None
    if not isinstance(rec, dict) or "valid" not in rec:
        raise CorpusFormatError(f"{where}: record is not a frame object")
    if rec["valid"]:
        for name, n in zip(_ARRAY_FIELDS, (4, None, 9, 9, 4)):
            value = rec.get(name)
            if not isinstance(value, list) or (n is not None and len(value) != n):
                raise CorpusFormatError(f"{where}: field {name!r} missing or wrong length")
    return rec


def read_corpus(path) -> Corpus:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CorpusFormatError(f"{manifest_path}: not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{manifest_path}: line {exc.lineno}: {exc.msg}") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CorpusFormatError(
            f"{manifest_path}: schema version {manifest.get('schema_version')} != {SCHEMA_VERSION}"
        )
    config = CorpusConfig.from_dict(manifest["config"])
    lines_by_file = {}
    for name, expected in manifest["files"].items():
        fpath = root / name
        if not fpath.exists():
            raise CorpusFormatError(f"{fpath}: record file missing")
        lines = fpath.read_text().splitlines()
        if len(lines) != expected:
            raise CorpusFormatError(
                f"{fpath}: manifest lists {expected} records, file has {len(lines)} "
                f"(line {len(lines) + 1} missing)" if len(lines) < expected else
                f"{fpath}: manifest lists {expected} records, file has {len(lines)}"
            )
        lines_by_file[name] = lines
    indexed = sum(w["n_frames"] for w in manifest["windows"])
    if indexed != sum(manifest["files"].values()):
        raise CorpusFormatError(
            f"{manifest_path}: window index covers {indexed} records but files hold "
            f"{sum(manifest['files'].values())}"
        )
    windows = []
    for entry in manifest["windows"]:
        lines = lines_by_file.get(entry["file"])
        if lines is None:
            raise CorpusFormatError(f"{manifest_path}: window {entry['window_id']} names unknown file")
        n = entry["n_frames"]
        arrays = {name: [] for name in _ARRAY_FIELDS}
        valid = np.zeros(n, dtype=bool)
        hidden_dim = None
        for i in range(n):
            lineno = entry["first_line"] + i
            if lineno > len(lines):
                raise CorpusFormatError(f"{root / entry['file']}: line {lineno}: record missing")
            rec = _parse_record(lines[lineno - 1], f"{root / entry['file']}: line {lineno}")
            if rec.get("t") != entry["start"] + i or rec.get("cow") != entry["cow_id"]:
                raise CorpusFormatError(f"{root / entry['file']}: line {lineno}: record out of order")
            valid[i] = rec["valid"]
            if rec["valid"]:
                hidden_dim = len(rec["posture_hidden"])
            for name in _ARRAY_FIELDS:
                arrays[name].append(rec[name])
        dims = {"posture_posterior": 4, "posture_hidden": hidden_dim, "neck_heatmap": 9,
                "tail_heatmap": 9, "bbox": 4}
        stacked = {}
        for name in _ARRAY_FIELDS:
            rows = [r if r is not None else [math.nan] * dims[name] for r in arrays[name]]
            stacked[name] = np.array(rows, dtype=float)
        seg = Segment(**stacked, valid=valid)
        windows.append(WindowSample(
            window_id=entry["window_id"],
            cow_id=entry["cow_id"],
            label=entry["label"],
            segment=entry["segment"],
            start=entry["start"],
            frames=seg,
            interfered=entry.get("interfered", False),
            expressed=tuple(entry.get("expressed", ())),
        ))
    return Corpus(config, manifest["seed"], windows)
