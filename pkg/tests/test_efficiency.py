"""Tests for the timing protocol, model cost reports and comparison tables."""

import csv
import math

import pytest

from lighttbnet.core.checkpoint import Checkpoint, encode, save_checkpoint
from lighttbnet.core.efficiency import (COMPARISON_HEADER, LAYER_HEADER, EfficiencyReport, bench_config,
                                        comparison_rows, count_macs, emit_comparison, time_inference,
                                        write_layer_table)
from lighttbnet.core.errors import ConfigError
from lighttbnet.core.model import ModelConfig, build


class FakeClock:
    """Nanosecond clock that returns explicit (start, end) pairs, one pair per timed pass."""

    def __init__(self, durations_ms):
        self.values = []
        t = 0
        for d in durations_ms:
            self.values += [t, t + int(d * 1e6)]
            t += 10_000_000
        self.calls = 0

    def __call__(self) -> int:
        value = self.values[self.calls]
        self.calls += 1
        return value


class TestTiming:
    """Inference timing with an injected clock."""

    def test_constant_duration(self, tiny_config):
        clock = FakeClock([2.0] * 10)
        mean_ms, std_ms = time_inference(build(tiny_config), warmup=2, reps=10, clock=clock)
        assert mean_ms == pytest.approx(2.0)
        assert std_ms == pytest.approx(0.0, abs=1e-12)

    def test_population_std(self, tiny_config):
        clock = FakeClock([1.0, 3.0] * 5)
        mean_ms, std_ms = time_inference(build(tiny_config), warmup=0, reps=10, clock=clock)
        assert mean_ms == pytest.approx(2.0)
        assert std_ms == pytest.approx(1.0)

    def test_warmup_never_reads_clock(self, tiny_config):
        clock = FakeClock([2.0] * 4)
        time_inference(build(tiny_config), warmup=5, reps=4, clock=clock)
        assert clock.calls == 8

    def test_leaves_model_in_eval_mode(self, tiny_config):
        model = build(tiny_config)
        time_inference(model, warmup=0, reps=1, clock=FakeClock([1.0]))
        assert not model.training

    def test_reps_must_be_positive(self, tiny_config):
        with pytest.raises(ConfigError):
            time_inference(build(tiny_config), reps=0)

    def test_real_clock(self, tiny_config):
        mean_ms, std_ms = time_inference(build(tiny_config), warmup=1, reps=3)
        assert mean_ms > 0
        assert math.isfinite(std_ms) and std_ms >= 0


class TestBench:
    """Per-configuration efficiency reports."""

    def test_counts_and_size(self, tiny_config):
        report = bench_config(tiny_config, reps=0)
        assert report.name == "LightTBNet (N=2)"
        assert report.macs_total == count_macs(tiny_config).total_macs
        assert report.params_total == build(tiny_config).param_count()
        assert report.inference_mean_ms is None
        assert report.checkpoint_bytes == len(encode(Checkpoint.from_model(build(tiny_config))))

    def test_size_from_checkpoint_file(self, tiny_config, tmp_path):
        path = save_checkpoint(Checkpoint.from_model(build(tiny_config), epoch=3), tmp_path / "fold0.ltbn")
        report = bench_config(tiny_config, reps=0, checkpoint_path=path)
        assert report.checkpoint_bytes == path.stat().st_size

    def test_timed_with_clock(self, tiny_config):
        report = bench_config(tiny_config, warmup=0, reps=2, clock=FakeClock([4.0, 4.0]))
        assert report.inference_mean_ms == pytest.approx(4.0)
        assert report.to_dict()["inference_std_ms"] == pytest.approx(0.0, abs=1e-12)

    def test_param_count_falls_with_depth(self):
        params = [bench_config(ModelConfig.for_blocks(n), reps=0).params_total for n in (3, 4, 5)]
        assert params[0] > params[1] > params[2]

    def test_layer_table(self, tiny_config, tmp_path):
        report = bench_config(tiny_config, reps=0)
        path = write_layer_table(report, tmp_path / "layers.csv")
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == LAYER_HEADER
        assert rows[-1][0] == "total"
        assert int(rows[-1][5]) == report.macs_total
        assert rows[1][0] == "blocks.0.conv1"


def _report(name, macs, params, auc=None, mean_ms=None):
    metrics = {} if auc is None else {"auc": auc}
    return EfficiencyReport(name, macs, params, inference_mean_ms=mean_ms,
                            inference_std_ms=None if mean_ms is None else 0.1, metrics=metrics)


class TestComparison:
    """Comparison rows, best-value markers and emitted files."""

    def test_rows_keep_input_order_and_mark_best(self):
        rows = comparison_rows([_report("a", 2_000_000_000, 1_000_000, 0.90, 5.0),
                                _report("b", 1_000_000_000, 2_000_000, 0.95, 7.0)])
        assert [r[0] for r in rows] == ["a", "b"]
        header = list(COMPARISON_HEADER)
        auc_col, macs_col = header.index("AUC"), header.index("MACs (G)")
        params_col, time_col = header.index("Params (M)"), header.index("Inference (ms)")
        assert rows[0][auc_col] == "0.900" and rows[1][auc_col] == "0.950*"
        assert rows[0][macs_col] == "2.000" and rows[1][macs_col] == "1.000*"
        assert rows[0][params_col] == "1.000*"
        assert rows[0][time_col] == "5.00 ± 0.10*"

    def test_missing_metrics_stay_blank(self):
        rows = comparison_rows([_report("a", 10, 10), _report("b", 20, 20, 0.8)])
        acc_col = list(COMPARISON_HEADER).index("ACC")
        auc_col = list(COMPARISON_HEADER).index("AUC")
        assert rows[0][acc_col] == "" and rows[1][acc_col] == ""
        # a single value is not marked
        assert rows[1][auc_col] == "0.800"

    def test_ties_go_to_earliest_row(self):
        rows = comparison_rows([_report("a", 10, 10, 0.9), _report("b", 10, 10, 0.9)])
        auc_col = list(COMPARISON_HEADER).index("AUC")
        assert rows[0][auc_col].endswith("*")
        assert not rows[1][auc_col].endswith("*")

    def test_emit_files(self, tmp_path):
        reports = [_report("N=3", 3_000_000, 1000, 0.9), _report("N=4", 2_000_000, 900, 0.92)]
        text = emit_comparison(reports, tmp_path)
        assert "N=3" in text and "MACs (G)" in text
        with open(tmp_path / "comparison.csv", newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == COMPARISON_HEADER
        assert [r[0] for r in rows[1:]] == ["N=3", "N=4"]
        with open(tmp_path / "comparison_scatter.csv", newline="", encoding="utf-8") as f:
            scatter = list(csv.reader(f))
        assert scatter[0] == ["model", "auc", "macs_g", "params_m"]
        assert scatter[2][1] == "0.9200"

    def test_emit_requires_reports(self, tmp_path):
        with pytest.raises(ConfigError):
            emit_comparison([], tmp_path)
