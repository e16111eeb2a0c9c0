"""MAC/parameter accounting, the inference timing protocol and comparison tables."""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import os
import pathlib
import time

import numpy as np

from .checkpoint import Checkpoint, encode
from .errors import ConfigError
from .model import LightTBNet, ModelConfig, build
from .tensor import Tensor, no_grad
from .utils import fmt_float, format_table, logger, make_rng, write_csv

DEFAULT_WARMUP = 20
DEFAULT_REPS = 300

Clock = Callable[[], int]


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    input_shape: Tuple[int, ...]
    output_shape: Tuple[int, ...]
    params: int
    macs: int


@dataclass
class MacCount:
    """Per-layer rows for a single image and their totals."""
    layers: List[LayerCost]

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.layers)


def count_macs(model_config: ModelConfig, input_shape: Optional[Sequence[int]] = None) -> MacCount:
    """
    Static cost of one forward pass of a single image.

    Convolutions cost C_in*k_h*k_w*C_out*H_out*W_out MACs, linear layers
    in*out; batch norm, ReLU, pooling and softmax count as zero. Bias adds
    are excluded from MACs but included in parameters.
    """
    model = build(model_config)
    shape = tuple(input_shape) if input_shape is not None else model_config.input_shape
    rows = model.layer_profile((1,) + tuple(shape))
    layers = [LayerCost(r["name"], r["kind"], r["input_shape"], r["output_shape"], r["params"], r["macs"])
              for r in rows]
    return MacCount(layers)


def count_params(model_config: ModelConfig) -> int:
    return build(model_config).param_count()


def time_inference(model: LightTBNet, input_shape: Optional[Sequence[int]] = None, warmup: int = DEFAULT_WARMUP,
                   reps: int = DEFAULT_REPS, clock: Clock = time.perf_counter_ns,
                   seed: int = 0) -> Tuple[float, float]:
    """
    Latency protocol: batch of one fixed random input, `warmup` untimed
    forward passes, then `reps` timed ones.

    Args:
        model: Model to time (switched to eval mode)
        input_shape: (C, H, W); defaults to the model's input shape
        warmup: Untimed passes; the clock is never read during them
        reps: Timed passes
        clock: Monotonic nanosecond clock, read once before and once after each pass
        seed: Seed of the fixed input

    Returns:
        (mean_ms, std_ms), std being the population standard deviation
    """
    if reps < 1:
        raise ConfigError(f"reps must be >= 1, got {reps}", {"reps": reps})
    shape = tuple(input_shape) if input_shape is not None else model.config.input_shape
    model.eval()
    x = Tensor(make_rng(seed).standard_normal((1,) + shape), dtype=model.fc2.weight.dtype)
    durations = np.empty(reps, dtype=np.float64)
    with no_grad():
        for _ in range(warmup):
            model(x)
        for i in range(reps):
            start = clock()
            model(x)
            end = clock()
            durations[i] = (end - start) / 1e6
    mean_ms = float(durations.mean())
    std_ms = float(durations.std())
    logger.info(f"Inference timing: {reps} reps after {warmup} warm-up, mean={mean_ms:.3f} ms std={std_ms:.3f} ms")
    return mean_ms, std_ms


@dataclass
class EfficiencyReport:
    """One model configuration's cost, latency, size and (optionally) metrics."""
    name: str
    macs_total: int
    params_total: int
    layers: List[LayerCost] = field(default_factory=list)
    inference_mean_ms: Optional[float] = None
    inference_std_ms: Optional[float] = None
    checkpoint_bytes: Optional[int] = None
    metrics: Dict[str, float] = field(default_factory=dict)
    metrics_std: Dict[str, float] = field(default_factory=dict)

    @property
    def macs_g(self) -> float:
        return self.macs_total / 1e9

    @property
    def params_m(self) -> float:
        return self.params_total / 1e6

    @property
    def size_mb(self) -> Optional[float]:
        return None if self.checkpoint_bytes is None else self.checkpoint_bytes / 1e6

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name, "macs_total": self.macs_total, "macs_g": self.macs_g,
            "params_total": self.params_total, "params_m": self.params_m,
            "inference_mean_ms": self.inference_mean_ms, "inference_std_ms": self.inference_std_ms,
            "checkpoint_bytes": self.checkpoint_bytes, "size_mb": self.size_mb,
            "metrics": self.metrics, "metrics_std": self.metrics_std,
        }


def bench_config(model_config: ModelConfig, name: Optional[str] = None, warmup: int = DEFAULT_WARMUP,
                 reps: int = DEFAULT_REPS, checkpoint_path: Optional[os.PathLike] = None,
                 clock: Clock = time.perf_counter_ns) -> EfficiencyReport:
    """
    Full efficiency report for one configuration.

    Size is the byte count of `checkpoint_path` when given, otherwise of the
    serialized checkpoint of a freshly built model.
    """
    name = name or f"LightTBNet (N={model_config.n_blocks})"
    counts = count_macs(model_config)
    model = build(model_config)
    mean_ms, std_ms = (None, None)
    if reps > 0:
        mean_ms, std_ms = time_inference(model, warmup=warmup, reps=reps, clock=clock)
    if checkpoint_path is not None:
        size = os.path.getsize(checkpoint_path)
    else:
        size = len(encode(Checkpoint.from_model(model)))
    report = EfficiencyReport(name, counts.total_macs, counts.total_params, counts.layers, mean_ms, std_ms, size)
    logger.info(f"{name}: {report.macs_g:.3f} GMACs, {report.params_m:.3f} M params, {size} bytes")
    return report


METRIC_COLUMNS = (("ACC", "acc"), ("F1", "f1"), ("AUC", "auc"))
COMPARISON_HEADER = ("model", "ACC", "F1", "AUC", "MACs (G)", "Params (M)", "Inference (ms)", "Size (MB)")


def _best_index(values: List[Optional[float]], higher_is_better: bool) -> Optional[int]:
    present = [(v, i) for i, v in enumerate(values) if v is not None]
    if len(present) < 2:
        return None
    # earliest row wins ties
    if higher_is_better:
        return max(present, key=lambda p: (p[0], -p[1]))[1]
    return min(present, key=lambda p: (p[0], p[1]))[1]


def _metric_cell(report: EfficiencyReport, key: str) -> str:
    if key not in report.metrics:
        return ""
    text = fmt_float(report.metrics[key])
    if key in report.metrics_std:
        text += f" ± {fmt_float(report.metrics_std[key])}"
    return text


def comparison_rows(reports: Sequence[EfficiencyReport]) -> List[List[str]]:
    """
    Table rows in input order. The best value per column gets a trailing
    "*" (highest for ACC/F1/AUC, lowest for the cost columns) when at least
    two models have a value.
    """
    columns: List[Tuple[List[Optional[float]], List[str], bool]] = []
    for _, key in METRIC_COLUMNS:
        columns.append(([r.metrics.get(key) for r in reports], [_metric_cell(r, key) for r in reports], True))
    columns.append(([r.macs_g for r in reports], [f"{r.macs_g:.3f}" for r in reports], False))
    columns.append(([r.params_m for r in reports], [f"{r.params_m:.3f}" for r in reports], False))
    timing_text = ["" if r.inference_mean_ms is None else
                   f"{r.inference_mean_ms:.2f} ± {r.inference_std_ms:.2f}" for r in reports]
    columns.append(([r.inference_mean_ms for r in reports], timing_text, False))
    columns.append(([r.size_mb for r in reports], [fmt_float(r.size_mb, 2) for r in reports], False))

    rows = [[r.name] for r in reports]
    for values, cells, higher in columns:
        best = _best_index(values, higher)
        for i, cell in enumerate(cells):
            rows[i].append(cell + ("*" if i == best and cell else ""))
    return rows


def emit_comparison(reports: Sequence[EfficiencyReport], out_dir: os.PathLike,
                    stem: str = "comparison") -> str:
    """
    Write {stem}.csv (one row per model), {stem}_scatter.csv (auc, MACs,
    params per model) and return the aligned text table.
    """
    if not reports:
        raise ConfigError("emit_comparison needs at least one report")
    out_dir = pathlib.Path(out_dir)
    rows = comparison_rows(reports)
    write_csv(out_dir / f"{stem}.csv", COMPARISON_HEADER, rows)
    scatter = [[r.name, fmt_float(r.metrics.get("auc"), 4), f"{r.macs_g:.6f}", f"{r.params_m:.6f}"] for r in reports]
    write_csv(out_dir / f"{stem}_scatter.csv", ("model", "auc", "macs_g", "params_m"), scatter)
    return format_table(COMPARISON_HEADER, rows)


LAYER_HEADER = ("layer", "kind", "input_shape", "output_shape", "params", "macs")


def write_layer_table(report: EfficiencyReport, path: os.PathLike) -> pathlib.Path:
    rows = [[l.name, l.kind, "x".join(map(str, l.input_shape)), "x".join(map(str, l.output_shape)), l.params, l.macs]
            for l in report.layers]
    rows.append(["total", "", "", "", report.params_total, report.macs_total])
    return write_csv(path, LAYER_HEADER, rows)
