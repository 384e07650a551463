"""Command-line entry point: ``calvsign {synth,train,evaluate,verify}``.

Exit codes
----------
0  success
1  ``verify`` found a failing invariant
2  invalid configuration or arguments
3  file-system or corpus-format error
4  training failed (diverged); partial fold artifacts are flagged
5  a required model or corpus artifact is missing
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checks
from . import crossval as CV
from . import fusion as FU
from .fusion import FusionKind
from .nn import ContractError, Network, TrainConfig, TrainingError
from .streams import featurize
from .synthdata import CorpusConfig, CorpusFormatError, generate_corpus, read_corpus, write_corpus

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_TRAINING = 4
EXIT_MISSING = 5

ENV_SEED = "CALVSIGN_SEED"
ENV_OUT_DIR = "CALVSIGN_OUT_DIR"
FOLD_MANIFEST_VERSION = 1


class ConfigError(ValueError):
    pass


class MissingArtifactError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = CorpusConfig()
    train: TrainConfig = TrainConfig()
    fusion_max_epochs: int | None = None
    systems: tuple = CV.SYSTEM_ORDER
    raw_mixer: bool = False
    out_dir: str = "runs/default"

    def fusion_config(self) -> TrainConfig:
        if self.fusion_max_epochs is None:
            return self.train
        return dataclasses.replace(self.train, max_epochs=self.fusion_max_epochs)

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        train.pop("seed")
        return {
            "seed": self.seed,
            "corpus": self.corpus.to_dict(),
            "train": train,
            "fusion_max_epochs": self.fusion_max_epochs,
            "systems": list(self.systems),
            "raw_mixer": self.raw_mixer,
            "out_dir": self.out_dir,
        }

    def work_hash(self) -> str:
        """Hash of everything that affects trained models (not the output location)."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _check_value(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    return value


def _build(default, data, where: str, skip=()):
    """Override fields of dataclass instance ``default`` from ``data``.

    Unknown keys and wrongly typed values are rejected; nested dataclasses
    are merged field by field.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(default)} - set(skip)
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        current = getattr(default, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(current, value, f"{where}.{name}")
        else:
            kwargs[name] = _check_value(value, current, f"{where}.{name}")
    return dataclasses.replace(default, **kwargs)


def parse_run_config(data: dict, env=None) -> RunConfig:
    """Validate a config mapping; ``CALVSIGN_SEED`` / ``CALVSIGN_OUT_DIR`` in ``env`` override it."""
    env = os.environ if env is None else env
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    seed = _check_value(data.get("seed", 0), 0, "seed")
    out_dir = data.get("out_dir", RunConfig.out_dir)
    if not isinstance(out_dir, str):
        raise ConfigError("out_dir: expected a string")
    if env.get(ENV_SEED):
        try:
            seed = int(env[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer") from None
    if env.get(ENV_OUT_DIR):
        out_dir = env[ENV_OUT_DIR]
    try:
        corpus = _build(CorpusConfig(), data.get("corpus", {}), "corpus")
        train = _build(TrainConfig(), data.get("train", {}), "train", skip=("seed",))
        corpus.validate()
    except (TypeError, ContractError) as exc:
        raise ConfigError(str(exc)) from None
    fme = data.get("fusion_max_epochs")
    if fme is not None and (isinstance(fme, bool) or not isinstance(fme, int) or fme < 1):
        raise ConfigError("fusion_max_epochs: expected a positive integer or null")
    systems = data.get("systems", list(CV.SYSTEM_ORDER))
    if not isinstance(systems, list) or not systems or not all(isinstance(s, str) for s in systems):
        raise ConfigError("systems: expected a non-empty list of names")
    try:
        systems = tuple(CV.normalize_systems(systems))
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    raw_mixer = _check_value(data.get("raw_mixer", False), False, "raw_mixer")
    return RunConfig(seed, corpus, train, fme, systems, raw_mixer, out_dir)


def load_run_config(path, env=None) -> RunConfig:
    if path is None:
        return parse_run_config({}, env)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(data, env)


# ---------------------------------------------------------------------------
# artifacts


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def corpus_hash(corpus_dir) -> str:
    corpus_dir = Path(corpus_dir)
    h = hashlib.sha256()
    for path in sorted(corpus_dir.iterdir()):
        if path.is_file():
            h.update(path.name.encode())
            h.update(sha256_file(path).encode())
    return h.hexdigest()


def model_path(models_dir, system: str, fold: int) -> Path:
    return Path(models_dir) / f"{system}.{fold}.model"


def history_path(models_dir, system: str, fold: int) -> Path:
    return Path(models_dir) / f"{system}.{fold}.history.json"


def fold_manifest_path(models_dir, fold: int) -> Path:
    return Path(models_dir) / f"fold_{fold}.manifest.json"


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
    tmp.replace(path)


def save_fusion_model(path, kind: FusionKind, model) -> None:
    nets = {name: net.to_dict() for name, net in FU.model_networks(model).items()}
    _write_json(Path(path), {"format": "calvsign.fusion", "version": 1, "kind": kind.value, "networks": nets})


def load_fusion_model(path, kind: FusionKind):
    d = json.loads(Path(path).read_text())
    if d.get("format") != "calvsign.fusion" or d.get("kind") != kind.value:
        raise CorpusFormatError(f"{path}: not a {kind.value} fusion model")
    return FU.model_from_networks(kind, {k: Network.from_dict(v) for k, v in d["networks"].items()})


def fold_is_current(models_dir, fold: int, work_hash: str, data_hash: str) -> bool:
    """A fold can be skipped when its manifest matches the run and every listed file is intact."""
    path = fold_manifest_path(models_dir, fold)
    if not path.exists():
        return False
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError:
        return False
    if (m.get("status") != "complete" or m.get("config_hash") != work_hash
            or m.get("corpus_hash") != data_hash or m.get("version") != FOLD_MANIFEST_VERSION):
        return False
    for name, digest in m.get("files", {}).items():
        f = Path(models_dir) / name
        if not f.exists() or sha256_file(f) != digest:
            return False
    return True


def _train_and_write_fold(args) -> tuple[int, str, str]:
    feats, fold, cfg, models_dir, work_hash, data_hash = args
    models_dir = Path(models_dir)
    written = []
    status, error = "complete", ""
    try:
        models = CV.train_fold(feats, fold, cfg.systems, cfg.train, cfg.seed, cfg.raw_mixer,
                               cfg.fusion_config())
    except TrainingError as exc:
        status, error = "failed", str(exc)
        hist = getattr(exc, "history", None)
        if hist is not None:
            p = history_path(models_dir, "failed", fold.index)
            _write_json(p, hist.to_dict())
            written.append(p)
    else:
        for kind, net in models.streams.items():
            p = model_path(models_dir, kind.value, fold.index)
            net.save(p)
            written.append(p)
        for kind, model in models.fusion.items():
            p = model_path(models_dir, kind.value, fold.index)
            save_fusion_model(p, kind, model)
            written.append(p)
        for name, hist in models.histories.items():
            p = history_path(models_dir, name, fold.index)
            _write_json(p, hist.to_dict())
            written.append(p)
    manifest = {
        "version": FOLD_MANIFEST_VERSION,
        "fold": fold.index,
        "test_cow": fold.test_cow,
        "val_cows": list(fold.val_cows),
        "train_cows": list(fold.train_cows),
        "status": status,
        "partial": status != "complete",
        "error": error,
        "config_hash": work_hash,
        "corpus_hash": data_hash,
        "files": {p.name: sha256_file(p) for p in sorted(written)},
    }
    _write_json(fold_manifest_path(models_dir, fold.index), manifest)
    return fold.index, status, error


def load_fold_models(models_dir, fold: int, systems) -> CV.FoldModels:
    models = CV.FoldModels()
    missing = []
    for kind in CV.required_streams(systems):
        p = model_path(models_dir, kind.value, fold)
        if p.exists():
            models.streams[kind] = Network.load(p)
        else:
            missing.append(p.name)
    for name in systems:
        if name in CV.FUSION_SYSTEMS and FusionKind(name) in FU.TRAINABLE:
            p = model_path(models_dir, name, fold)
            if p.exists():
                models.fusion[FusionKind(name)] = load_fusion_model(p, FusionKind(name))
            else:
                missing.append(p.name)
    if missing:
        raise MissingArtifactError(f"fold {fold}: missing {', '.join(missing)} in {models_dir}")
    return models


# ---------------------------------------------------------------------------
# commands


def _load_corpus(path):
    if path is None:
        raise ConfigError("--corpus is required")
    if not Path(path, "manifest.json").exists():
        raise MissingArtifactError(f"no corpus manifest in {path}")
    return read_corpus(path)


def cmd_synth(cfg: RunConfig, out) -> int:
    out = Path(out) if out else Path(cfg.out_dir) / "corpus"
    corpus = generate_corpus(cfg.corpus, cfg.seed)
    write_corpus(corpus, out)
    counts = corpus.class_counts()
    print(f"corpus written to {out}")
    for name, n in counts.items():
        print(f"  {name}: {n} windows")
    print(f"  total: {sum(counts.values())} windows")
    return EXIT_OK


def cmd_train(cfg: RunConfig, corpus_dir, out, jobs: int) -> int:
    models_dir = Path(out) if out else Path(cfg.out_dir) / "models"
    corpus = _load_corpus(corpus_dir)
    models_dir.mkdir(parents=True, exist_ok=True)
    feats = featurize(corpus)
    cows = np.unique(feats.cow_ids)
    plan = CV.make_fold_plan(cows, cfg.seed)
    CV.check_fold_plan(plan, cows)
    work_hash, data_hash = cfg.work_hash(), corpus_hash(corpus_dir)
    todo = []
    for fold in plan:
        if fold_is_current(models_dir, fold.index, work_hash, data_hash):
            print(f"fold {fold.index}: up to date, skipped")
        else:
            todo.append((feats, fold, cfg, str(models_dir), work_hash, data_hash))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_and_write_fold, todo))
    else:
        results = [_train_and_write_fold(t) for t in todo]
    failed = [(i, err) for i, status, err in results if status != "complete"]
    for i, status, _ in results:
        print(f"fold {i}: {status}")
    if failed:
        for i, err in failed:
            print(f"error: fold {i} training failed: {err}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, corpus_dir, models_dir, out) -> int:
    models_dir = Path(models_dir) if models_dir else Path(cfg.out_dir) / "models"
    out = Path(out) if out else Path(cfg.out_dir) / "report"
    corpus = _load_corpus(corpus_dir)
    feats = featurize(corpus)
    cows = np.unique(feats.cow_ids)
    plan = CV.make_fold_plan(cows, cfg.seed)
    CV.check_fold_plan(plan, cows)
    fold_models = [load_fold_models(models_dir, fold.index, cfg.systems) for fold in plan]
    scores = [CV.score_fold(feats, fold, m, cfg.systems, cfg.raw_mixer) for fold, m in zip(plan, fold_models)]
    report = CV.assemble_report(feats, plan, cfg.systems, cfg.seed, scores)
    report.write(out)
    print(f"{'system':24s} {'precision':>9s} {'recall':>9s} {'f1':>9s} {'auc':>9s}")
    for name in report.systems:
        a = report.aggregate(name)
        print(f"{CV.DISPLAY_NAMES[name]:24s} {a['precision']:9.3f} {a['recall']:9.3f} {a['f1']:9.3f} {a['auc']:9.3f}")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_verify(gradient_fault: float = 0.0) -> int:
    t0 = time.perf_counter()
    results = checks.run_checks(gradient_fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:16s} {r.detail} ({r.seconds:.2f}s)")
    ok = all(r.passed for r in results)
    print(f"{'all checks passed' if ok else 'verification FAILED'} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calvsign", description="Multi-stream calving-sign detection on "
                                     "synthetic cow behaviour data.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=False, jobs=False):
        p.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="master seed (overrides config and CALVSIGN_SEED)")
        p.add_argument("--out", help="output directory")
        if corpus:
            p.add_argument("--corpus", help="corpus directory written by 'synth'")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel folds (default 1)")

    common(sub.add_parser("synth", help="generate a synthetic corpus"))
    common(sub.add_parser("train", help="train per-fold stream and fusion models"), corpus=True, jobs=True)
    ev = sub.add_parser("evaluate", help="score trained models and write the report")
    common(ev, corpus=True)
    ev.add_argument("--models", help="model directory written by 'train'")
    ver = sub.add_parser("verify", help="run the fast invariant suite")
    ver.add_argument("--inject-gradient-fault", type=float, default=0.0, metavar="SCALE",
                     help="test hook: corrupt analytic gradients by SCALE before checking")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        if args.command == "verify":
            return cmd_verify(args.inject_gradient_fault)
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "train":
            return cmd_train(cfg, args.corpus, args.out, args.jobs)
        return cmd_evaluate(cfg, args.corpus, args.models, args.out)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (OSError, CorpusFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
