"""End-to-end synthetic benchmark: train an ensemble, score it, sweep resolutions.

Everything here is a pure function of :class:`BenchmarkConfig`; running the
same config twice writes byte-identical files.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .analysis import AdaptationCurve, FrontierGrid, SweepSeries, adaptation_study, asymmetric_sweep, symmetric_sweep
from .metrics import AHR, MetricsReport, evaluate
from .network import ModelParams, NetworkConfig, transfer_localization_weights
from .raster_ops import AugmentationConfig, ResolutionSchedule
from .scene_data import Hazard, ScenePair, synthetic_dataset
from .training import TrainConfig, train_stage1_localization, train_stage2_siamese, write_trace_csv

logger = logging.getLogger(__name__)

DRY_HAZARDS = (Hazard.WIND, Hazard.FIRE, Hazard.EARTHQUAKE, Hazard.TSUNAMI)


@dataclass(frozen=True)
class BenchmarkConfig:
    n_train: int = 64
    n_test: int = 16
    n_adapt: int = 16
    side: int = 128
    n_buildings: int = 6
    size_range: tuple[int, int] = (20, 40)
    n_events: int = 4
    data_seed: int = 1
    ensemble_seeds: tuple[int, ...] = (0, 1, 2)
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(side=128, widths=(16, 32, 32)))
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            lr=4e-3,
            lr_schedule="cosine",
            stage1_epochs=2,
            stage2_epochs=3,
            fine_tune_epochs=6,
            augmentation=AugmentationConfig(hflip=True, vflip=True, rot90=True, blur_sigma=1.0, noise_sigma=0.02),
        )
    )
    schedule: ResolutionSchedule = ResolutionSchedule()
    adapt_shares: tuple[float, ...] = (0.0, 0.25, 0.5)
    # fine-tuning on the new event starts from trained weights and uses a smaller step
    fine_tune_lr: float = 1e-3
    jobs: int = 1

    @classmethod
    def quick(cls) -> "BenchmarkConfig":
        """A few-second variant for smoke tests and reproducibility checks."""
        return cls(
            n_train=8,
            n_test=4,
            n_adapt=4,
            side=32,
            n_buildings=3,
            size_range=(6, 12),
            ensemble_seeds=(0, 1),
            network=NetworkConfig(side=32, widths=(4, 8)),
            train=replace(cls().train, stage1_epochs=1, stage2_epochs=1, fine_tune_epochs=1),
            schedule=ResolutionSchedule((0.5, 2.0, 5.0)),
            adapt_shares=(0.0, 0.5),
        )


@dataclass
class SeedRun:
    seed: int
    stage1: ModelParams
    params: ModelParams
    trace: list


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    runs: list[SeedRun]
    single: dict[int, MetricsReport]
    untrained: MetricsReport
    ensemble: MetricsReport
    symmetric: SweepSeries
    grid: FrontierGrid
    adaptation: AdaptationCurve
    seconds: float

    def summary(self) -> dict:
        return {
            "single": {str(k): r.metric_values() for k, r in self.single.items()},
            "untrained_transfer": self.untrained.metric_values(),
            "ensemble": self.ensemble.metric_values(),
            "symmetric": {
                str(g): rep.metric_values() for g, rep in zip(self.symmetric.schedule, self.symmetric.reports)
            },
            "adaptation_gain_at_max_share": self.adaptation.gains[-1],
        }


def benchmark_scenes(cfg: BenchmarkConfig) -> tuple[list[ScenePair], list[ScenePair], list[ScenePair]]:
    """Training and held-out test scenes from dry hazards plus a flood event for adaptation."""
    common = dict(side=cfg.side, n_buildings=cfg.n_buildings, size_range=cfg.size_range)
    train = synthetic_dataset(
        cfg.n_train, cfg.data_seed, hazards=DRY_HAZARDS, n_events=cfg.n_events, event_prefix="train", **common
    )
    test = synthetic_dataset(
        cfg.n_test, cfg.data_seed + 1, hazards=DRY_HAZARDS, n_events=cfg.n_events, split="test",
        event_prefix="test", **common,
    )
    flood = synthetic_dataset(
        cfg.n_adapt, cfg.data_seed + 2, hazards=(Hazard.FLOOD,), n_events=1, split="holdout",
        event_prefix="flood", **common,
    )
    return train, test, flood


def _train_seed(args) -> SeedRun:
    scenes, cfg, seed = args
    tcfg = replace(cfg.train, seed=seed)
    stage1 = train_stage1_localization(scenes, tcfg, replace(cfg.network, seed=seed))
    stage2 = train_stage2_siamese(scenes, stage1.params, tcfg)
    return SeedRun(seed, stage1.params, stage2.params, stage1.trace + stage2.trace)


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), out_dir: str | os.PathLike | None = None) -> BenchmarkResult:
    start = time.perf_counter()
    train, test, flood = benchmark_scenes(cfg)
    work = [(train, cfg, s) for s in cfg.ensemble_seeds]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            runs = list(ex.map(_train_seed, work))
    else:
        runs = [_train_seed(w) for w in work]
    models = [r.params for r in runs]
    single = {r.seed: evaluate(test, [r.params]) for r in runs}
    untrained = evaluate(test, [transfer_localization_weights(runs[0].stage1, seed=runs[0].seed)])
    ensemble = evaluate(test, models)
    symmetric = symmetric_sweep(models, test, cfg.schedule)
    grid = asymmetric_sweep(models, test, cfg.schedule)
    adapt_cfg = replace(cfg.train, lr=cfg.fine_tune_lr, seed=cfg.ensemble_seeds[0])
    adaptation = adaptation_study(models[0], flood, cfg.adapt_shares, adapt_cfg, scheme=AHR)
    result = BenchmarkResult(
        cfg, runs, single, untrained, ensemble, symmetric, grid, adaptation, time.perf_counter() - start
    )
    logger.info("benchmark finished in %.1f s", result.seconds)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: BenchmarkResult, out_dir: str | os.PathLike) -> None:
    """Checkpoints, traces, reports and CSVs; wall-clock time goes to a separate log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for run in result.runs:
        run.params.save(out / f"model_seed{run.seed}.ckpt")
        write_trace_csv(run.trace, out / f"trace_seed{run.seed}.csv")
        (out / f"report_seed{run.seed}.json").write_text(result.single[run.seed].to_json())
    (out / "report_ensemble.json").write_text(result.ensemble.to_json())
    (out / "confusion_ensemble.csv").write_text(result.ensemble.confusion.to_csv())
    (out / "sweep_symmetric.csv").write_text(result.symmetric.to_csv())
    (out / "sweep_asymmetric.csv").write_text(result.grid.to_csv())
    (out / "adaptation.csv").write_text(result.adaptation.to_csv())
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    config_doc = {**asdict(result.config), "train": result.config.train.to_dict()}
    (out / "config.json").write_text(json.dumps(config_doc, indent=2, sort_keys=True, default=list) + "\n")
    with open(out / "timing.log", "a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} wall_seconds={result.seconds:.1f}\n")
