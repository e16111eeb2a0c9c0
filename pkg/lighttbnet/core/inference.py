"""Five-fold ensemble loading and single-image prediction."""

from typing import Any, Dict, List, Optional, Tuple
import os
import pathlib

from .checkpoint import Checkpoint, fold_checkpoint_path, load_checkpoint
from .errors import MissingCheckpointError
from .evaluation import N_ENSEMBLE, ensemble_scores
from .imaging import PreprocessConfig, Preprocessor, normalize
from .model import LightTBNet
from .tensor import Tensor, no_grad
from .utils import logger

Ensemble = List[Tuple[LightTBNet, Checkpoint]]


def load_ensemble(checkpoint_dir: os.PathLike, n_models: int = N_ENSEMBLE) -> Ensemble:
    """Load fold0..fold{n-1} checkpoints; every missing file is named in the error."""
    checkpoint_dir = pathlib.Path(checkpoint_dir)
    paths = [fold_checkpoint_path(checkpoint_dir, k) for k in range(n_models)]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise MissingCheckpointError(f"missing {len(missing)} of {n_models} checkpoints in {checkpoint_dir}",
                                     {"missing": missing})
    ensemble = [load_checkpoint(p) for p in paths]
    logger.info(f"Loaded {n_models}-model ensemble from {checkpoint_dir}")
    return ensemble


def best_member(ensemble: Ensemble) -> Tuple[LightTBNet, Checkpoint]:
    """Member with the highest validation AUC (lowest fold id on ties)."""
    return max(ensemble, key=lambda mc: (mc[1].val_auc if mc[1].val_auc is not None else -1.0,
                                         -(mc[1].fold_id or 0)))


def ensemble_preprocessor(ensemble: Ensemble, fallback: Optional[PreprocessConfig] = None) -> Preprocessor:
    """Preprocessing recorded in the first checkpoint, else `fallback`, else defaults."""
    recorded = ensemble[0][1].preprocess if ensemble else {}
    if recorded:
        return Preprocessor(PreprocessConfig.from_dict(recorded))
    return Preprocessor(fallback or PreprocessConfig(image_size=ensemble[0][0].config.input_size))


def predict_image(ensemble: Ensemble, image_path: os.PathLike,
                  preprocess: Optional[PreprocessConfig] = None) -> Dict[str, Any]:
    """
    TB score of one image file as the mean of every member's score.

    Returns:
        Dictionary with the ensemble score, per-fold scores and the image path
    """
    preprocessor = ensemble_preprocessor(ensemble, preprocess)
    image = preprocessor.load(image_path)
    x = normalize(image)[None, None]
    per_fold = []
    with no_grad():
        for model, _ in ensemble:
            model.eval()
            per_fold.append(model.tb_scores(Tensor(x, dtype=model.fc2.weight.dtype)))
    score = float(ensemble_scores(per_fold, len(per_fold))[0]) if len(per_fold) > 1 else float(per_fold[0][0])
    logger.info(f"Predicted {image_path}: score={score:.4f}")
    return {"image": str(image_path), "tb_score": score,
            "fold_scores": [float(s[0]) for s in per_fold], "n_models": len(per_fold)}
