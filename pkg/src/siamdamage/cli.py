"""Command-line entry point: synth, train, eval, sweep, folds, adapt.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import analysis
from .metrics import SCHEMES, evaluate, evaluate_maps
from .network import DecisionRule, ModelParams, NetworkConfig
from .raster_ops import ResolutionSchedule
from .scene_data import (
    DatasetManifest,
    Hazard,
    ManifestError,
    generate_synthetic_scene,
    load_manifest,
    save_manifest,
    truth_grades,
    write_scene_files,
)
from .training import TrainConfig, train_two_stage, write_trace_csv

logger = logging.getLogger("siamdamage")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    manifest: str
    output_dir: str
    checkpoints: list[str] = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    decision: DecisionRule = field(default_factory=DecisionRule)
    resolutions: tuple[float, ...] = ResolutionSchedule().gsds
    folds: str | None = None
    scheme: str = "fine"
    seed: int = 0
    ensemble_seeds: list[int] = field(default_factory=lambda: [0])
    adapt_event: str | None = None
    shares: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.25, 0.5])

    def digest(self) -> str:
        doc = {
            **asdict(self),
            "train": self.train.to_dict(),
        }
        blob = json.dumps(doc, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


def load_run_config(path: str | Path, base_dir: Path | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    base = base_dir or path.parent
    errors = []
    for key in ("manifest", "output_dir"):
        if not isinstance(doc.get(key), str):
            errors.append(f"{key}: required string")
    known = {f for f in RunConfig.__dataclass_fields__}
    for key in doc:
        if key not in known:
            errors.append(f"{key}: unknown field")
    if errors:
        raise ConfigError("config: " + "; ".join(errors))

    def section(name, build):
        try:
            return build(doc[name]) if name in doc else None
        except (TypeError, ValueError) as exc:
            errors.append(f"{name}: {exc}")
            return None

    train = section("train", TrainConfig.from_dict)
    network = section("network", NetworkConfig.from_dict)
    decision = section("decision", lambda d: DecisionRule(**d))
    schedule = section("resolutions", lambda v: ResolutionSchedule(tuple(v)))
    scheme = doc.get("scheme", "fine")
    if scheme not in SCHEMES:
        errors.append(f"scheme: must be one of {sorted(SCHEMES)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        errors.append("seed: must be an integer")
    shares = doc.get("shares", [0.0, 0.1, 0.25, 0.5])
    if not isinstance(shares, list) or any(not 0 <= s <= 0.5 for s in shares):
        errors.append("shares: must be a list of values in [0, 0.5]")

    def resolve(p):
        q = Path(p)
        return str(q if q.is_absolute() else (base / q))

    manifest = resolve(doc["manifest"])
    if not Path(manifest).is_file():
        errors.append(f"manifest: file not found: {manifest}")
    folds = doc.get("folds")
    if folds is not None:
        folds = resolve(folds)
        if not Path(folds).is_file():
            errors.append(f"folds: file not found: {folds}")
    checkpoints = [resolve(c) for c in doc.get("checkpoints", [])]
    if errors:
        raise ConfigError("config: " + "; ".join(errors))
    cfg = RunConfig(
        manifest=manifest,
        output_dir=resolve(doc["output_dir"]),
        checkpoints=checkpoints,
        folds=folds,
        scheme=scheme,
        seed=seed,
        ensemble_seeds=list(doc.get("ensemble_seeds", [seed])),
        adapt_event=doc.get("adapt_event"),
        shares=[float(s) for s in shares],
    )
    if train is not None:
        cfg.train = train
    if network is not None:
        cfg.network = network
    if decision is not None:
        cfg.decision = decision
    if schedule is not None:
        cfg.resolutions = schedule.gsds
    return cfg


# ---------------------------------------------------------------------------
# provenance


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_provenance(out: Path, command: str, cfg_digest: str, seed: int, inputs, outputs) -> None:
    doc = {
        "command": command,
        "config_digest": cfg_digest,
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": {Path(p).name: _sha256(Path(p)) for p in outputs},
    }
    (out / f"provenance_{command}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with open(out / "run.log", "a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {command} digest={cfg_digest} seed={seed}\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hazards = list(Hazard)
    records = []
    for i in range(args.scenes):
        event = i % args.events
        split = "test" if args.test_every and i % args.test_every == args.test_every - 1 else "train"
        scene = generate_synthetic_scene(
            args.seed * 100_003 + i,
            args.side,
            args.buildings,
            hazard_type=hazards[event % len(hazards)] if args.mixed_hazards else Hazard.WIND,
            event_id=f"event-{event:02d}",
            split=split,
            scene_id=f"scene-{i:04d}",
            size_range=args.building_size,
        )
        records.append(write_scene_files(scene, out, f"scene-{i:04d}"))
    manifest_path = out / "manifest.json"
    save_manifest(DatasetManifest(records, out), manifest_path)
    # the digest covers generation settings only, so copies written elsewhere match
    settings = {k: v for k, v in vars(args).items() if k not in ("func", "out", "verbose")}
    digest = hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()
    _write_provenance(out, "synth", digest, args.seed, [], [manifest_path])
    print(f"wrote {len(records)} scenes to {manifest_path}")
    return 0


def _setup(args) -> tuple[RunConfig, Path]:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "resolutions", None):
        try:
            cfg.resolutions = ResolutionSchedule.parse(args.resolutions).gsds
        except ValueError as exc:
            raise ConfigError(f"--resolutions: {exc}") from exc
    if getattr(args, "scheme", None):
        cfg.scheme = args.scheme
    if getattr(args, "share", None):
        try:
            cfg.shares = [float(s) for s in args.share.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--share: {exc}") from exc
        if any(not 0 <= s <= 0.5 for s in cfg.shares):
            raise ConfigError("--share: values must lie in [0, 0.5]")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _load_scenes(cfg: RunConfig, split: str | None = None):
    manifest = load_manifest(cfg.manifest)
    if split is not None:
        manifest = manifest.filter(split=split)
    return manifest.load_scenes()


def _load_models(cfg: RunConfig, out: Path) -> list[ModelParams]:
    paths = cfg.checkpoints or sorted(str(p) for p in out.glob("model_seed*.ckpt"))
    if not paths:
        raise ConfigError("checkpoints: none configured and none found in output_dir")
    return [ModelParams.load(p) for p in paths]


def cmd_train(args) -> int:
    cfg, out = _setup(args)
    scenes = _load_scenes(cfg, "train")
    outputs = []
    for seed in cfg.ensemble_seeds:
        tcfg = replace(cfg.train, seed=seed)
        result = train_two_stage(scenes, tcfg, replace(cfg.network, seed=seed))
        ckpt = out / f"model_seed{seed}.ckpt"
        trace = out / f"trace_seed{seed}.csv"
        result.params.save(ckpt)
        write_trace_csv(result.trace, trace)
        outputs += [ckpt, trace]
    _write_provenance(out, "train", cfg.digest(), cfg.seed, [cfg.manifest], outputs)
    return 0


def cmd_eval(args) -> int:
    cfg, out = _setup(args)
    scenes = _load_scenes(cfg, "test") or _load_scenes(cfg)
    scheme = SCHEMES[cfg.scheme]
    if args.oracle:
        truths = [truth_grades(s) for s in scenes]
        preds = [t.copy() for t in truths]
        for p in preds:
            p[p == 255] = 0
        report = evaluate_maps(preds, truths, scheme)
    else:
        report = evaluate(scenes, _load_models(cfg, out), cfg.decision, scheme)
    report_path, cm_path = out / "report.json", out / "confusion.csv"
    report_path.write_text(report.to_json())
    cm_path.write_text(report.confusion.to_csv())
    _write_provenance(out, "eval", cfg.digest(), cfg.seed, [cfg.manifest, *cfg.checkpoints], [report_path, cm_path])
    print(json.dumps(report.metric_values(), indent=2))
    return 0


def cmd_sweep(args) -> int:
    cfg, out = _setup(args)
    scenes = _load_scenes(cfg, "test") or _load_scenes(cfg)
    models = _load_models(cfg, out)
    schedule = ResolutionSchedule(cfg.resolutions)
    fn = analysis.symmetric_sweep if args.mode == "symmetric" else analysis.asymmetric_sweep
    result = fn(models, scenes, schedule, cfg.decision, SCHEMES[cfg.scheme], jobs=args.jobs)
    path = out / f"sweep_{args.mode}.csv"
    path.write_text(result.to_csv())
    _write_provenance(out, f"sweep-{args.mode}", cfg.digest(), cfg.seed, [cfg.manifest], [path])
    return 0


def cmd_folds(args) -> int:
    cfg, out = _setup(args)
    folds = analysis.FoldSpec.load(cfg.folds) if cfg.folds else analysis.xbd_folds()
    scenes = _load_scenes(cfg)
    try:
        folds.validate(sorted({s.event_id for s in scenes}))
    except ValueError as exc:
        raise ConfigError(f"folds: {exc}") from exc
    result = analysis.event_cross_validation(
        scenes, folds, cfg.train, cfg.network, cfg.decision, SCHEMES[cfg.scheme]
    )
    path = out / "folds.json"
    path.write_text(result.to_json())
    _write_provenance(out, "folds", cfg.digest(), cfg.seed, [cfg.manifest], [path])
    return 0


def cmd_adapt(args) -> int:
    cfg, out = _setup(args)
    scenes = _load_scenes(cfg)
    if cfg.adapt_event is not None:
        scenes = [s for s in scenes if s.event_id == cfg.adapt_event]
        if not scenes:
            raise ConfigError(f"adapt_event: no scenes for event {cfg.adapt_event!r}")
    models = _load_models(cfg, out)
    curve = analysis.adaptation_study(
        models[0], scenes, cfg.shares, cfg.train, cfg.decision, SCHEMES[cfg.scheme]
    )
    path = out / "adaptation.csv"
    path.write_text(curve.to_csv())
    _write_provenance(out, "adapt", cfg.digest(), cfg.seed, [cfg.manifest], [path])
    return 0


def _size_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected two integers LO,HI") from None
    if not 1 <= lo <= hi:
        raise argparse.ArgumentTypeError("need 1 <= LO <= HI")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siamdamage", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic scene set and manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--side", type=int, default=128)
    p.add_argument("--buildings", type=int, default=8)
    p.add_argument("--events", type=int, default=4)
    p.add_argument("--test-every", type=int, default=4, help="every k-th scene goes to the test split")
    p.add_argument("--mixed-hazards", action="store_true")
    p.add_argument("--building-size", type=_size_range, default=(14, 30), metavar="LO,HI")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def common(p):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--scheme", choices=sorted(SCHEMES), default=None)

    p = sub.add_parser("train", help="two-stage training for every ensemble seed")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints on the test split")
    common(p)
    p.add_argument("--oracle", action="store_true", help="feed ground truth as the prediction")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="resolution perturbation sweep")
    common(p)
    p.add_argument("--mode", choices=["symmetric", "asymmetric"], default="symmetric")
    p.add_argument("--resolutions", help="comma-separated gsd list, first = native")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("folds", help="event-level cross-validation")
    common(p)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("adapt", help="fine-tuning adaptation curve on a new event")
    common(p)
    p.add_argument("--share", help="comma-separated shares in [0, 0.5]")
    p.set_defaults(func=cmd_adapt)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "synth" and (args.scenes < 0 or args.events < 1):
        print("error: --scenes must be >= 0 and --events >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
