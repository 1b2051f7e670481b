import pytest
from pydantic import ValidationError

from .benchmark import (
    ArmRun,
    BenchmarkResult,
    BenchmarkSettings,
    arm_config,
    check_gates,
    format_results,
    run_benchmark,
    save_results,
    to_markdown,
)
from .config import DatasetConfig, DepressionSchedule, TrainConfig


def result_with(**arms):
    return BenchmarkResult(
        runs={
            name: [
                ArmRun(seed=i, ap=ap, ap50=ap, score_iou_corr=corr, seconds=1.0) for i, (ap, corr) in enumerate(values)
            ]
            for name, values in arms.items()
        }
    )


def test_arm_config_sets_method_selection_and_seed():
    base = TrainConfig(iterations=10)
    cfg = arm_config(base, "mal_all", 4)
    assert (cfg.method, cfg.selection, cfg.seed, cfg.iterations) == ("mal", "all", 4, 10)
    assert arm_config(base, "baseline", 1).method == "baseline"
    with pytest.raises(ValueError):
        arm_config(base, "faster_rcnn", 0)


def test_baseline_arms_differ_only_in_depression():
    base = TrainConfig(iterations=10, depression=DepressionSchedule(variant="constant", peak_fraction=0.3))
    plain = arm_config(base, "baseline", 0)
    depressed = arm_config(base, "baseline_depression", 0)
    assert (plain.method, plain.depression.variant) == ("baseline", "none")
    assert (depressed.method, depressed.depression.variant) == ("baseline", "symmetric_step")
    assert depressed.depression.peak_fraction == 0.3
    assert {**plain.model_dump(), "depression": depressed.depression.model_dump()} == depressed.model_dump()


def test_unknown_arm_is_rejected_by_settings():
    with pytest.raises(ValidationError):
        BenchmarkSettings(arms=["faster_rcnn"])


def test_means_skip_undefined_values():
    result = result_with(baseline=[(0.2, None), (0.4, 0.5)])
    assert result.mean("baseline", "ap") == pytest.approx(0.3)
    assert result.mean("baseline", "score_iou_corr") == pytest.approx(0.5)
    assert result.mean("missing", "ap") is None


def test_gates_pass_when_mal_is_not_worse():
    result = result_with(
        baseline=[(0.30, 0.1), (0.32, 0.2)],
        mal_all_top1=[(0.31, 0.4), (0.31, 0.3)],
        mal_all=[(0.30, 0.2), (0.30, 0.2)],
    )
    gates = check_gates(result)
    assert [g.passed for g in gates] == [True, True, True]
    assert result.margin("mal_all_top1", "baseline") == pytest.approx(0.0)


def test_gates_fail_on_worse_ap_or_undefined_correlation():
    result = result_with(baseline=[(0.5, 0.3)], mal_all_top1=[(0.4, None)])
    gates = check_gates(result)
    assert len(gates) == 2
    assert not gates[0].passed
    assert not gates[1].passed
    assert "undefined" in gates[1].detail


def test_gates_only_cover_arms_that_ran():
    assert check_gates(result_with(baseline=[(0.5, 0.3)])) == []


def test_format_marks_the_best_arm():
    result = result_with(baseline=[(0.2, 0.1)], mal_all_top1=[(0.3, 0.2)])
    result.gates = check_gates(result)
    text = format_results(result)
    assert "RANKED BY AP:" in text
    ranked = text.split("RANKED BY AP:")[1]
    assert ranked.index("mal_all_top1") < ranked.index("baseline")
    assert "<<< BEST" in text
    assert "PASS  mal ap >= baseline ap" in text


def test_markdown_has_one_row_per_run(tmp_path):
    result = result_with(baseline=[(0.2, 0.1), (0.3, 0.1)], mal_all_top1=[(0.3, 0.2), (0.4, None)])
    markdown = to_markdown(result)
    assert sum(line.startswith("| baseline |") for line in markdown.splitlines()) == 2
    assert "| mal_all_top1 | 1 | 0.4000 | 0.4000 | NA | 1.0 |" in markdown
    assert "mal_all_top1 ap margin over baseline: +0.1000" in markdown
    save_results(result, tmp_path / "nested" / "bench.md")
    assert (tmp_path / "nested" / "bench.md").read_text() == markdown


def test_tiny_benchmark_runs_every_arm_and_seed():
    settings = BenchmarkSettings(
        dataset=DatasetConfig(
            scene_count=10, class_count=2, max_objects=2, min_size=10, max_size=24, max_aspect=6,
            image_width=64, image_height=64, seed=3,
        ),
        train=TrainConfig(iterations=3, batch_size=2, warmup_iters=0, bag_size=8, hidden_dim=8),
        seeds=[0, 1],
    )
    result = run_benchmark(settings)
    assert list(result.runs) == ["baseline", "baseline_depression", "mal_all_top1", "mal_all"]
    assert all([run.seed for run in runs] == [0, 1] for runs in result.runs.values())
    assert len(result.gates) == 4
    assert result.gates[-1].name == "single-scene overfit ap50 = 1.0"
    assert result.overfit_ap50 is not None
    again = run_benchmark(settings)
    assert [r.ap for r in again.runs["mal_all"]] == [r.ap for r in result.runs["mal_all"]]
