"""
LightTBNet - Python Package

A from-scratch numpy implementation of the LightTBNet chest X-ray TB
classifier: autodiff tensors, layers, preprocessing, 5-fold training,
ensemble evaluation, efficiency accounting and explanations.
"""

import os as _os


def _configure_threads():
    """
    Pin BLAS/OpenMP thread counts before numpy loads its backends.

    LIGHTTBNET_NUM_THREADS (default "1") is applied to OMP_NUM_THREADS,
    OPENBLAS_NUM_THREADS, MKL_NUM_THREADS and NUMEXPR_NUM_THREADS unless
    those are already set.
    """
    threads = _os.environ.get("LIGHTTBNET_NUM_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(var, threads)


_configure_threads()

from lighttbnet.core.cli import main  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    'Tensor',
    'LightTBNet',
    'ModelConfig',
    'build',
    'load_manifest',
    'stratified_split',
    'train_fold',
    'train_all_folds',
    'save_checkpoint',
    'load_checkpoint',
    'auc',
    'classify_and_report',
    'ensemble_scores',
    'count_macs',
    'time_inference',
    'saliency',
    'gradcam',
    'main',
]

# Import key objects to make them available at package level
from .core import (  # noqa: E402
    Tensor,
    LightTBNet,
    ModelConfig,
    build,
    load_manifest,
    stratified_split,
    train_fold,
    train_all_folds,
    save_checkpoint,
    load_checkpoint,
    auc,
    classify_and_report,
    ensemble_scores,
    count_macs,
    time_inference,
    saliency,
    gradcam,
)


# Define a main function to be used as a package entry point
def entrypoint():
    """Console-script entry point; exits with the CLI's status code."""
    import sys
    sys.exit(main())
