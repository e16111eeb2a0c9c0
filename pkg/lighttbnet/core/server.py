"""MCP tool server exposing prediction, explanation and efficiency reports."""

from typing import Any, Dict, List, Optional
import asyncio
import functools
import json
import pathlib
import threading

from mcp.server.fastmcp import FastMCP

from .config import RunConfig
from .efficiency import bench_config
from .errors import ExplainError, LightTBNetError
from .explain import explain_image
from .inference import Ensemble, best_member, ensemble_preprocessor, load_ensemble, predict_image
from .model import ModelConfig
from .utils import logger

# Initialize FastMCP server
mcp_server = FastMCP("lighttbnet")

_state: Dict[str, Any] = {"config": RunConfig()}
_ensembles: Dict[str, Ensemble] = {}
_lock = threading.Lock()


def configure(config: RunConfig) -> None:
    """Set the run config whose checkpoint and output directories the tools default to."""
    _state["config"] = config
    with _lock:
        _ensembles.clear()
    logger.info(f"Tool server configured: checkpoints={config.checkpoints}")


def _ensemble(checkpoint_dir: Optional[str]) -> Ensemble:
    directory = str(pathlib.Path(checkpoint_dir) if checkpoint_dir else _state["config"].checkpoints)
    with _lock:
        if directory not in _ensembles:
            _ensembles[directory] = load_ensemble(directory)
        return _ensembles[directory]


def ltbn_tool(func):
    """Decorator for tools: logs the call and turns failures into a JSON error document."""
    @functools.wraps(func)
    async def wrapper(*args, **kwargs):
        logger.debug(f"Function call: {func.__name__}")
        logger.debug(f"Kwargs: {kwargs}")
        try:
            result = await func(*args, **kwargs)
        except LightTBNetError as e:
            logger.error(f"Tool {func.__name__} failed: {e.message}")
            return json.dumps(e.to_dict(), indent=2)
        except Exception as e:
            logger.exception(f"Unexpected error in tool {func.__name__}")
            return json.dumps({"error": str(e), "kind": type(e).__name__, "details": {}}, indent=2)
        if isinstance(result, str):
            return result
        return json.dumps(result, indent=2)
    return wrapper


@mcp_server.tool()
@ltbn_tool
async def predict_tb_score(image_path: str, checkpoint_dir: Optional[str] = None) -> str:
    """
    Score one chest X-ray with the five-fold LightTBNet ensemble.

    Args:
        image_path: PNG or PGM image file
        checkpoint_dir: Directory holding fold0.ltbn..fold4.ltbn (default: configured run)

    Returns:
        JSON with tb_score (mean of the five models) and per-fold scores
    """
    ensemble = _ensemble(checkpoint_dir)
    result = await asyncio.to_thread(predict_image, ensemble, image_path, _state["config"].preprocess)
    return json.dumps(result, indent=2)


@mcp_server.tool()
@ltbn_tool
async def explain_prediction(image_path: str, checkpoint_dir: Optional[str] = None,
                             output_path: Optional[str] = None, fold: Optional[int] = None) -> str:
    """
    Render saliency and grad-CAM overlays for one image.

    Args:
        image_path: PNG or PGM image file
        checkpoint_dir: Directory holding the fold checkpoints (default: configured run)
        output_path: PNG to write (default: <output_dir>/explain/<image stem>.png)
        fold: Fold model to explain (default: best validation AUC)

    Returns:
        JSON with the overlay path, TB score and heatmap provenance
    """
    ensemble = _ensemble(checkpoint_dir)
    if fold is None:
        _, checkpoint = best_member(ensemble)
    else:
        matches = [mc for mc in ensemble if mc[1].fold_id == fold]
        if not matches:
            raise ExplainError(f"no checkpoint for fold {fold}", {"available": [c.fold_id for _, c in ensemble]})
        checkpoint = matches[0][1]
    out_dir = pathlib.Path(_state["config"].output_dir) / "explain"
    out = output_path or str(out_dir / f"{pathlib.Path(image_path).stem}.png")
    preprocessor = ensemble_preprocessor(ensemble, _state["config"].preprocess)

    def run() -> Dict[str, Any]:
        # private copy: the cached models stay gradient-free
        return explain_image(checkpoint.to_model(), preprocessor.load(image_path), out)

    result = await asyncio.to_thread(run)
    result["fold"] = checkpoint.fold_id
    return json.dumps(result, indent=2)


@mcp_server.tool()
@ltbn_tool
async def efficiency_report(n_blocks: Optional[List[int]] = None, input_size: Optional[int] = None,
                            reps: int = 30, warmup: int = 5) -> str:
    """
    MACs, parameter count, latency and serialized size for LightTBNet variants.

    Args:
        n_blocks: Block counts to compare (default: the configured model)
        input_size: Square input size (default: the configured model's)
        reps: Timed repetitions; 0 skips timing
        warmup: Untimed warm-up passes

    Returns:
        JSON list of per-model reports (without per-layer rows)
    """
    base = _state["config"].model
    size = input_size or base.input_size
    reports = []
    for n in n_blocks or [base.n_blocks]:
        cfg = ModelConfig.for_blocks(n, input_size=size)
        report = await asyncio.to_thread(bench_config, cfg, None, warmup, reps)
        reports.append(report.to_dict())
    return json.dumps({"reports": reports}, indent=2)
