"""Input-gradient saliency, grad-CAM and three-panel overlay rendering."""

from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence
import os
import pathlib

import numpy as np
from PIL import Image as PILImage
from PIL.PngImagePlugin import PngInfo

from .errors import ExplainError, ShapeError
from .imaging import normalize, resize_bilinear
from .model import TB_CLASS, LightTBNet
from .tensor import Tensor, pick, tensor_sum
from .utils import logger

DEFAULT_ALPHA = 0.5


@dataclass
class Heatmap:
    """Values in [0,1] at display resolution, with provenance."""
    values: np.ndarray
    method: str
    target_layer: Optional[str] = None
    class_index: int = TB_CLASS
    tb_score: Optional[float] = None

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    def to_dict(self) -> Dict[str, Any]:
        return {"method": self.method, "target_layer": self.target_layer, "class_index": self.class_index,
                "tb_score": self.tb_score, "width": self.width, "height": self.height}


def max_normalize(values: np.ndarray) -> np.ndarray:
    """Scale non-negative values so the maximum is 1; all-zero stays zero."""
    values = np.asarray(values, dtype=np.float64)
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0:
        return np.zeros_like(values)
    return values / peak


def _as_input(image: np.ndarray, dtype) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[None, None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ShapeError(f"explanations take one image [H,W] or [1,C,H,W], got {arr.shape}")
    return arr.astype(dtype)


def _zero_parameter_grads(model) -> None:
    if hasattr(model, "zero_grad"):
        model.zero_grad()


def saliency(model: Callable[[Tensor], Tensor], image: np.ndarray, class_index: int = TB_CLASS) -> Heatmap:
    """
    |d prob[class] / d input| per pixel, max-normalised.

    `model` is any callable mapping a [1,C,H,W] tensor to [1,2] class
    probabilities; a LightTBNet is switched to eval mode first.
    """
    if hasattr(model, "eval"):
        model.eval()
    dtype = model.fc2.weight.dtype if isinstance(model, LightTBNet) else np.float64
    x = Tensor(_as_input(image, dtype), requires_grad=True)
    probs = model(x)
    if probs.shape != (1, 2):
        raise ExplainError(f"model must return [1,2] probabilities, got {probs.shape}")
    score = pick(probs, [class_index])
    tensor_sum(score).backward()
    grad = np.zeros(x.shape) if x.grad is None else np.abs(x.grad)
    _zero_parameter_grads(model)
    values = max_normalize(grad[0].max(axis=0))
    return Heatmap(values, "saliency", None, class_index, float(probs.data[0, TB_CLASS]))


def gradcam_from_activations(activations: np.ndarray, gradients: np.ndarray,
                             size: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Grad-CAM map from one image's target activations and their gradients,
    both [C, h, w]: channel weights are the spatial mean of the gradients,
    the map is ReLU(sum_c weight_c * activation_c), optionally bilinearly
    upsampled to `size` (height, width), then max-normalised.
    """
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if a.ndim != 3 or a.shape != g.shape:
        raise ExplainError(f"grad-CAM needs matching [C,h,w] activations and gradients, got {a.shape} / {g.shape}")
    weights = g.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    if size is not None and tuple(size) != cam.shape:
        cam = np.maximum(resize_bilinear(cam, tuple(size)).astype(np.float64), 0.0)
    return max_normalize(cam)


def default_target_layer(model: LightTBNet) -> str:
    return f"blocks.{model.config.n_blocks - 1}"


def gradcam(model: LightTBNet, image: np.ndarray, target_layer: Optional[str] = None,
            class_index: int = TB_CLASS, upsample: bool = True) -> Heatmap:
    """
    Grad-CAM of the class logit at `target_layer` (default: last residual
    block output), upsampled to the input resolution unless `upsample` is False.
    """
    target_layer = target_layer or default_target_layer(model)
    model.eval()
    x = Tensor(_as_input(image, model.fc2.weight.dtype))
    logits, activations = model.forward_with_activations(x)
    if target_layer not in activations:
        raise ExplainError(f"unknown target layer '{target_layer}'", {"available": sorted(activations)})
    target = activations[target_layer]
    if target.ndim != 4:
        raise ExplainError(f"target layer '{target_layer}' has no spatial extent (shape {target.shape})",
                           {"shape": list(target.shape)})
    model.zero_grad()
    tensor_sum(pick(logits, [class_index])).backward()
    grads = target.grad if target.grad is not None else np.zeros_like(target.data)
    size = x.shape[2:] if upsample else None
    values = gradcam_from_activations(target.data[0], grads[0], size)
    model.zero_grad()
    e = np.exp(logits.data[0] - logits.data[0].max())
    tb_score = float(e[TB_CLASS] / e.sum())
    return Heatmap(values, "gradcam", target_layer, class_index, tb_score)


def hot_colormap(values: np.ndarray) -> np.ndarray:
    """
    Black-red-yellow-white lookup: r = clip(3h), g = clip(3h - 1),
    b = clip(3h - 2). Returns float RGB in [0,1], shape (..., 3).
    """
    h = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.clip(3 * h, 0, 1), np.clip(3 * h - 1, 0, 1), np.clip(3 * h - 2, 0, 1)], axis=-1)


def overlay(base: np.ndarray, heat: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Blend (1 - alpha*h) * base + alpha*h * hot(h); uint8 RGB."""
    base = np.clip(np.asarray(base, dtype=np.float64), 0.0, 1.0)
    heat = np.asarray(heat, dtype=np.float64)
    if base.shape != heat.shape:
        raise ExplainError(f"heatmap {heat.shape} does not match image {base.shape}")
    weight = (alpha * np.clip(heat, 0.0, 1.0))[..., None]
    rgb = (1.0 - weight) * base[..., None] + weight * hot_colormap(heat)
    return np.clip(np.floor(rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)


def format_score(score: float) -> str:
    return f"score={score:.4f}"


def render_overlay(image: np.ndarray, saliency_map: Heatmap, gradcam_map: Heatmap, out_path: os.PathLike,
                   alpha: float = DEFAULT_ALPHA) -> pathlib.Path:
    """
    Write a side-by-side PNG: preprocessed image | saliency overlay | grad-CAM overlay.

    The TB score is stored as PNG text metadata ("tb_score") and in a .txt
    sidecar next to the image.
    """
    base = np.asarray(image, dtype=np.float64)
    panels = [overlay(base, np.zeros_like(base), alpha), overlay(base, saliency_map.values, alpha),
              overlay(base, gradcam_map.values, alpha)]
    canvas = np.concatenate(panels, axis=1)
    score = gradcam_map.tb_score if gradcam_map.tb_score is not None else saliency_map.tb_score
    out_path = pathlib.Path(out_path)
    info = PngInfo()
    if score is not None:
        info.add_text("tb_score", f"{score:.4f}")
    info.add_text("panels", "preprocessed|saliency|gradcam")
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray(canvas).save(out_path, format="PNG", pnginfo=info)
        if score is not None:
            out_path.with_suffix(".txt").write_text(format_score(score) + "\n", encoding="utf-8")
    except OSError as e:
        raise ExplainError(f"cannot write overlay {out_path}: {e}", {"path": str(out_path)})
    logger.info(f"Wrote overlay {out_path} ({format_score(score) if score is not None else 'no score'})")
    return out_path


def explain_image(model: LightTBNet, image: np.ndarray, out_path: os.PathLike,
                  target_layer: Optional[str] = None, alpha: float = DEFAULT_ALPHA) -> Dict[str, Any]:
    """
    Explain one preprocessed [0,1] image: normalise it, compute saliency and
    grad-CAM, render the overlay and return a summary.
    """
    display = np.asarray(image, dtype=np.float64)
    x = normalize(display)
    sal = saliency(model, x)
    cam = gradcam(model, x, target_layer)
    path = render_overlay(display, sal, cam, out_path, alpha)
    return {"path": str(path), "tb_score": cam.tb_score, "saliency": sal.to_dict(), "gradcam": cam.to_dict()}
