"""Leave-one-cow-out nested cross-validation over all systems."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fusion as FU
from .fusion import FusionKind
from .metrics import summarize
from .nn import ContractError, TrainConfig
from .streams import STREAMS, FeatureSet, StreamKind, featurize, train_stream
from .synthdata import Corpus

# row order of the comparison tables: fusion methods, reference selections, baselines
SYSTEM_ORDER = (
    "posterior_average", "posterior_mixer", "hlo_concat", "hlo_mixer",
    "upper_limit", "max_prob", "min_prob",
    "e2e", "posture", "rotation", "movement",
)
DISPLAY_NAMES = {
    "posterior_average": "MS-Posterior-Average",
    "posterior_mixer": "MS-Posterior-Mixer",
    "hlo_concat": "MS-HLO-Concat",
    "hlo_mixer": "MS-HLO-Mixer",
    "upper_limit": "Upper Limit",
    "max_prob": "Max Prob Selection",
    "min_prob": "Min Prob Selection",
    "e2e": "E2E",
    "posture": "SS-Posture",
    "rotation": "SS-Rotation",
    "movement": "SS-Movement",
}
STREAM_SYSTEMS = {k.value for k in StreamKind}
FUSION_SYSTEMS = {k.value for k in FusionKind}
MIXER_SYSTEMS = ("posterior_mixer", "hlo_mixer")


def normalize_systems(systems) -> list[str]:
    names = [s.value if hasattr(s, "value") else str(s) for s in systems]
    unknown = [s for s in names if s not in DISPLAY_NAMES]
    if unknown:
        raise ContractError(f"unknown systems: {unknown}")
    return [s for s in SYSTEM_ORDER if s in names]


def required_streams(systems) -> list[StreamKind]:
    names = set(normalize_systems(systems))
    need = {StreamKind(s) for s in names & STREAM_SYSTEMS}
    if names & FUSION_SYSTEMS:
        need.update(STREAMS)
    return [k for k in StreamKind if k in need]


# ---------------------------------------------------------------------------
# fold plan


@dataclass(frozen=True)
class Fold:
    index: int
    test_cow: int
    val_cows: tuple
    train_cows: tuple


def make_fold_plan(cows, seed: int, n_val: int = 2) -> list[Fold]:
    """One fold per cow; validation cows rotate along a seeded cyclic order."""
    cows = sorted(int(c) for c in cows)
    if len(cows) < n_val + 2:
        raise ContractError(f"need at least {n_val + 2} cows for nested CV, got {len(cows)}")
    order = [cows[i] for i in np.random.default_rng(seed).permutation(len(cows))]
    plan = []
    for i, test in enumerate(cows):
        pos = order.index(test)
        val = tuple(sorted(order[(pos + j) % len(order)] for j in range(1, n_val + 1)))
        train = tuple(c for c in cows if c != test and c not in val)
        plan.append(Fold(i, test, val, train))
    return plan


def check_fold_plan(plan: list[Fold], cows) -> None:
    cows = sorted(int(c) for c in cows)
    tests = sorted(f.test_cow for f in plan)
    if tests != cows:
        raise ContractError("every cow must be the test cow exactly once")
    for f in plan:
        groups = [{f.test_cow}, set(f.val_cows), set(f.train_cows)]
        if any(a & b for i, a in enumerate(groups) for b in groups[i + 1:]):
            raise ContractError(f"fold {f.index}: cow appears in more than one partition")
        if set().union(*groups) != set(cows):
            raise ContractError(f"fold {f.index}: partitions do not cover all cows")
        if not f.val_cows or not f.train_cows:
            raise ContractError(f"fold {f.index}: empty train or validation partition")


def fold_indices(feats: FeatureSet, fold: Fold) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cows = feats.cow_ids
    return (
        np.flatnonzero(np.isin(cows, fold.train_cows)),
        np.flatnonzero(np.isin(cows, fold.val_cows)),
        np.flatnonzero(cows == fold.test_cow),
    )


def system_seed(seed: int, fold: int, name: str) -> int:
    code = SYSTEM_ORDER.index(name)
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(fold), code)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# per-fold work


@dataclass
class FoldModels:
    streams: dict = field(default_factory=dict)  # StreamKind -> Network
    fusion: dict = field(default_factory=dict)  # FusionKind -> fusion model
    histories: dict = field(default_factory=dict)  # system name -> TrainHistory


def train_fold(feats: FeatureSet, fold: Fold, systems, cfg: TrainConfig, seed: int,
               raw_mixer: bool = False, fusion_cfg: TrainConfig | None = None) -> FoldModels:
    """Train the fold's streams, then the fusion models on the frozen streams.

    ``fusion_cfg`` (default: ``cfg``) sets the schedule of the fusion stage.
    """
    systems = normalize_systems(systems)
    fusion_cfg = cfg if fusion_cfg is None else fusion_cfg
    tr, va, _ = fold_indices(feats, fold)
    models = FoldModels()
    for kind in required_streams(systems):
        net, hist = train_stream(kind, feats, tr, va, replace(cfg, seed=system_seed(seed, fold.index, kind.value)))
        models.streams[kind] = net
        models.histories[kind.value] = hist
    for name in systems:
        if name in FUSION_SYSTEMS and FusionKind(name) in FU.TRAINABLE:
            model, hist = FU.train_fusion(name, models.streams, feats, tr, va,
                                          replace(fusion_cfg, seed=system_seed(seed, fold.index, name)), raw_mixer)
            models.fusion[FusionKind(name)] = model
            models.histories[name] = hist
    return models


def score_fold(feats: FeatureSet, fold: Fold, models: FoldModels, systems, raw_mixer: bool = False) -> dict:
    """Scores of the test cow's windows per system; mixer systems also carry weights."""
    systems = normalize_systems(systems)
    _, _, te = fold_indices(feats, fold)
    out = {}
    posts = hlos = mx = None
    if any(s in FUSION_SYSTEMS for s in systems):
        posts, hlos = FU.stream_outputs(models.streams, feats, te)
        mx = FU.feature_mixer_inputs(feats, te, raw=raw_mixer)
    for name in systems:
        if name in STREAM_SYSTEMS:
            kind = StreamKind(name)
            if kind not in models.streams:
                raise ContractError(f"fold {fold.index}: missing {name} model")
            p, _ = models.streams[kind].predict(feats.stream(kind)[te])
            out[name] = {"scores": p[:, 1], "weights": None}
        else:
            kind = FusionKind(name)
            model = models.fusion.get(kind)
            if kind in FU.TRAINABLE and model is None:
                raise ContractError(f"fold {fold.index}: missing {name} model")
            s, w = FU.fused_scores(kind, model, mx, posts, hlos, feats.labels[te])
            out[name] = {"scores": s, "weights": w}
    return out


def _run_fold(args):
    feats, fold, systems, cfg, seed, raw_mixer, fusion_cfg = args
    models = train_fold(feats, fold, systems, cfg, seed, raw_mixer, fusion_cfg)
    return models, score_fold(feats, fold, models, systems, raw_mixer)


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    systems: list
    seed: int
    plan: list
    window_ids: np.ndarray
    cow_ids: np.ndarray
    labels: np.ndarray
    interfered: np.ndarray
    folds_of: np.ndarray  # fold index that scored each window
    scores: dict  # system -> (N,) aligned with window_ids
    weights: dict  # mixer system -> (N, 3)
    threshold: float = 0.5
    histories: dict = field(default_factory=dict)  # (fold, system) -> TrainHistory

    def aggregate(self, system: str, mask=None) -> dict:
        m = np.ones(len(self.labels), dtype=bool) if mask is None else np.asarray(mask)
        return summarize(self.scores[system][m], self.labels[m], self.threshold)

    def per_fold(self, system: str) -> list[dict]:
        rows = []
        for f in self.plan:
            m = self.folds_of == f.index
            rows.append({"fold": f.index, "test_cow": f.test_cow, **summarize(
                self.scores[system][m], self.labels[m], self.threshold)})
        return rows

    def metric(self, system: str, name: str, mask=None) -> float:
        return self.aggregate(system, mask)[name]

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "threshold": self.threshold,
            "fold_plan": [{"fold": f.index, "test_cow": f.test_cow, "val_cows": list(f.val_cows),
                           "train_cows": list(f.train_cows)} for f in self.plan],
            "windows": {
                "window_id": self.window_ids.tolist(),
                "cow_id": self.cow_ids.tolist(),
                "label": self.labels.tolist(),
                "interfered": self.interfered.tolist(),
                "fold": self.folds_of.tolist(),
            },
            "systems": {},
        }
        for name in self.systems:
            out["systems"][name] = {
                "display_name": DISPLAY_NAMES[name],
                "aggregate": self.aggregate(name),
                "folds": self.per_fold(name),
                "scores": self.scores[name].tolist(),
            }
            if name in self.weights:
                out["systems"][name]["weights"] = self.weights[name].tolist()
        return out

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")
        with (out / "summary.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["system", "precision", "recall", "f1", "auc"])
            for name in self.systems:
                a = self.aggregate(name)
                w.writerow([DISPLAY_NAMES[name]] + [f"{a[k]:.6f}" for k in ("precision", "recall", "f1", "auc")])
        roc_dir = out / "roc"
        roc_dir.mkdir(exist_ok=True)
        for name in self.systems:
            with (roc_dir / f"{name}.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["fpr", "tpr"])
                for fpr, tpr in self.aggregate(name)["roc"]:
                    w.writerow([repr(fpr), repr(tpr)])
        for name, weights in sorted(self.weights.items()):
            with (out / f"weights_{name}.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["window_id", "w_posture", "w_rotation", "w_movement", "fused_probability"])
                for wid, row, p in zip(self.window_ids, weights, self.scores[name]):
                    w.writerow([int(wid)] + [repr(float(v)) for v in row] + [repr(float(p))])
        return out


def assemble_report(feats: FeatureSet, plan: list[Fold], systems, seed: int, fold_scores: list,
                    histories: dict | None = None) -> EvalReport:
    systems = normalize_systems(systems)
    n = len(feats)
    folds_of = np.full(n, -1)
    scores = {s: np.full(n, np.nan) for s in systems}
    weights = {}
    for fold, result in zip(plan, fold_scores):
        _, _, te = fold_indices(feats, fold)
        if np.any(folds_of[te] >= 0):
            raise ContractError(f"fold {fold.index}: window scored twice")
        folds_of[te] = fold.index
        for name, r in result.items():
            scores[name][te] = r["scores"]
            if r["weights"] is not None:
                weights.setdefault(name, np.full((n, 3), np.nan))[te] = r["weights"]
    if np.any(folds_of < 0):
        raise ContractError("some windows were never scored")
    return EvalReport(systems, seed, plan, feats.window_ids, feats.cow_ids, feats.labels, feats.interfered,
                      folds_of, scores, weights, histories=histories or {})


def run_nested_cv(data, systems=SYSTEM_ORDER, cfg: TrainConfig = TrainConfig(), seed: int = 0,
                  jobs: int = 1, raw_mixer: bool = False, keep_models: bool = False,
                  fusion_cfg: TrainConfig | None = None):
    """Train and score every system on every outer fold; returns an :class:`EvalReport`.

    ``data`` is a :class:`Corpus` or a precomputed :class:`FeatureSet`. With
    ``keep_models`` the per-fold models are returned alongside the report.
    """
    feats = featurize(data) if isinstance(data, Corpus) else data
    systems = normalize_systems(systems)
    cows = np.unique(feats.cow_ids)
    plan = make_fold_plan(cows, seed)
    check_fold_plan(plan, cows)
    tasks = [(feats, fold, systems, cfg, seed, raw_mixer, fusion_cfg) for fold in plan]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    histories = {(fold.index, name): h for fold, (models, _) in zip(plan, results)
                 for name, h in models.histories.items()}
    report = assemble_report(feats, plan, systems, seed, [r[1] for r in results], histories)
    if keep_models:
        return report, [r[0] for r in results]
    return report
