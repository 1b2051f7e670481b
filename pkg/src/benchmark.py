# ##################################################################
# benchmark runner
# trains each arm on one seeded synthetic dataset, evaluates the val split
# and checks the non-inferiority and correlation-ordering gates

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from pydantic import Field

from .config import DatasetConfig, EvalConfig, StrictModel, TrainConfig, parse_config
from .evaluation import evaluate
from .mal import fit
from .scenes import generate_dataset

logger = logging.getLogger(__name__)

ARMS = {
    "baseline": {"method": "baseline", "depression": {"variant": "none"}},
    "baseline_depression": {"method": "baseline", "depression": {"variant": "symmetric_step"}},
    "mal_all_top1": {"method": "mal", "selection": "all_top1"},
    "mal_all": {"method": "mal", "selection": "all"},
}


# ##################################################################
# benchmark settings
# defaults are the desk-scale acceptance run: 250 scenes, 3 seeds, T=2000
class BenchmarkSettings(StrictModel):
    dataset: DatasetConfig = DatasetConfig(scene_count=250, class_count=3, slender_fraction=0.3, seed=0)
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    seeds: list[int] = Field(default=[0, 1, 2], min_length=1)
    arms: list[Literal["baseline", "baseline_depression", "mal_all_top1", "mal_all"]] = Field(
        default=list(ARMS), min_length=1
    )
    # trains mal on a one-scene dataset and expects ap50 = 1.0 on that scene
    overfit: bool = True


@dataclass
class ArmRun:
    seed: int
    ap: float | None
    ap50: float | None
    score_iou_corr: float | None
    seconds: float


@dataclass
class Gate:
    name: str
    passed: bool
    detail: str


@dataclass
class BenchmarkResult:
    runs: dict[str, list[ArmRun]] = field(default_factory=dict)
    gates: list[Gate] = field(default_factory=list)
    overfit_ap50: float | None = None

    def mean(self, arm: str, metric: str) -> float | None:
        values = [getattr(run, metric) for run in self.runs.get(arm, [])]
        values = [v for v in values if v is not None]
        return sum(values) / len(values) if values else None

    def margin(self, arm: str, reference: str, metric: str = "ap") -> float | None:
        a, b = self.mean(arm, metric), self.mean(reference, metric)
        return None if a is None or b is None else a - b

    @property
    def passed(self) -> bool:
        return all(gate.passed for gate in self.gates)


def arm_config(train: TrainConfig, arm: str, seed: int) -> TrainConfig:
    if arm not in ARMS:
        raise ValueError(f"unknown benchmark arm '{arm}'")
    data = train.model_dump(mode="json")
    for key, value in {**ARMS[arm], "seed": seed}.items():
        data[key] = {**data[key], **value} if isinstance(value, dict) else value
    return parse_config(data, TrainConfig)


def _not_worse(result: BenchmarkResult, name: str, arm: str, reference: str, metric: str) -> Gate | None:
    if arm not in result.runs or reference not in result.runs:
        return None
    a, b = result.mean(arm, metric), result.mean(reference, metric)
    if a is None or b is None:
        return Gate(name, False, f"{metric} undefined for {arm if a is None else reference}")
    return Gate(name, a >= b, f"{arm} {a:.4f} vs {reference} {b:.4f} (margin {a - b:+.4f})")


def check_gates(result: BenchmarkResult) -> list[Gate]:
    gates = [
        _not_worse(result, "mal ap >= baseline ap", "mal_all_top1", "baseline", "ap"),
        _not_worse(result, "mal score/iou corr >= baseline", "mal_all_top1", "baseline", "score_iou_corr"),
        _not_worse(result, "all-top1 ap >= all ap", "mal_all_top1", "mal_all", "ap"),
    ]
    return [gate for gate in gates if gate is not None]


# ##################################################################
# run benchmark
# one dataset for every arm and seed; the seed only changes training
def run_benchmark(settings: BenchmarkSettings, progress: bool = False) -> BenchmarkResult:
    dataset = generate_dataset(settings.dataset)
    train_scenes = dataset.train
    val_scenes = dataset.split(settings.eval.split)
    result = BenchmarkResult()
    for arm in settings.arms:
        runs = []
        for seed in settings.seeds:
            cfg = arm_config(settings.train, arm, seed)
            start = time.perf_counter()
            fitted = fit(train_scenes, cfg, dataset.class_count, progress=progress, noise_level=dataset.noise_level)
            report = evaluate(
                val_scenes,
                fitted.params,
                cfg,
                settings.eval,
                dataset.class_count,
                grid=fitted.grid,
                noise_level=dataset.noise_level,
            )
            elapsed = time.perf_counter() - start
            metrics = report.metrics
            runs.append(ArmRun(seed, metrics["ap"], metrics["ap50"], metrics["score_iou_corr"], elapsed))
            logger.info("%s seed %d: ap %s in %.1fs", arm, seed, metrics["ap"], elapsed)
        result.runs[arm] = runs
    result.gates = check_gates(result)
    if settings.overfit:
        result.overfit_ap50 = run_overfit(settings, progress)
        passed = result.overfit_ap50 == 1.0
        result.gates.append(Gate("single-scene overfit ap50 = 1.0", passed, f"ap50 {_cell(result.overfit_ap50)}"))
    return result


# ##################################################################
# run overfit
# one scene, trained and evaluated on itself with the mal_all_top1 arm
def run_overfit(settings: BenchmarkSettings, progress: bool = False) -> float | None:
    dataset = generate_dataset(settings.dataset.model_copy(update={"scene_count": 1}))
    cfg = arm_config(settings.train, "mal_all_top1", settings.seeds[0])
    fitted = fit(dataset.train, cfg, dataset.class_count, progress=progress, noise_level=dataset.noise_level)
    report = evaluate(
        dataset.train,
        fitted.params,
        cfg,
        settings.eval,
        dataset.class_count,
        grid=fitted.grid,
        noise_level=dataset.noise_level,
    )
    logger.info("single-scene overfit: ap50 %s", report.metrics["ap50"])
    return report.metrics["ap50"]


def _cell(value: float | None) -> str:
    return "NA" if value is None else f"{value:.4f}"


# ##################################################################
# format results
# readable table of per-arm means, a ranking by ap and the gate verdicts
def format_results(result: BenchmarkResult) -> str:
    lines = ["=" * 80, "MAL DESK BENCHMARK RESULTS", "=" * 80, ""]
    lines.append(f"{'Arm':<20} {'Seeds':>6} {'AP':>10} {'AP50':>10} {'Corr':>10} {'Time (s)':>10}")
    lines.append("-" * 70)
    for arm, runs in result.runs.items():
        seconds = sum(run.seconds for run in runs)
        lines.append(
            f"{arm:<20} {len(runs):>6} {_cell(result.mean(arm, 'ap')):>10} {_cell(result.mean(arm, 'ap50')):>10} "
            f"{_cell(result.mean(arm, 'score_iou_corr')):>10} {seconds:>10.1f}"
        )

    ranked = sorted(result.runs, key=lambda arm: -(result.mean(arm, "ap") or 0.0))
    lines += ["", "-" * 70, "RANKED BY AP:", "-" * 70]
    best = result.mean(ranked[0], "ap") if ranked else None
    for i, arm in enumerate(ranked, 1):
        margin = result.margin(arm, ranked[0])
        marker = " <<< BEST" if i == 1 and best is not None else ""
        lines.append(f"  {i}. {arm:<30} {_cell(result.mean(arm, 'ap')):>10} ({_margin(margin)}){marker}")

    lines += ["", "-" * 70, "GATES:", "-" * 70]
    for gate in result.gates:
        lines.append(f"  {'PASS' if gate.passed else 'FAIL'}  {gate.name}: {gate.detail}")
    lines += ["", "=" * 80]
    return "\n".join(lines) + "\n"


def _margin(value: float | None) -> str:
    return "NA" if value is None else f"{value:+.4f}"


def to_markdown(result: BenchmarkResult) -> str:
    lines = ["| arm | seed | ap | ap50 | score_iou_corr | seconds |", "|---|---|---|---|---|---|"]
    for arm, runs in result.runs.items():
        for run in runs:
            lines.append(
                f"| {arm} | {run.seed} | {_cell(run.ap)} | {_cell(run.ap50)} | {_cell(run.score_iou_corr)} "
                f"| {run.seconds:.1f} |"
            )
    lines.append("")
    for arm in result.runs:
        if arm != "baseline" and "baseline" in result.runs:
            lines.append(f"- {arm} ap margin over baseline: {_margin(result.margin(arm, 'baseline'))}")
    for gate in result.gates:
        lines.append(f"- {'PASS' if gate.passed else 'FAIL'} {gate.name}: {gate.detail}")
    return "\n".join(lines) + "\n"


def save_results(result: BenchmarkResult, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_markdown(result))
