"""Full five-fold training and ensemble evaluation on the synthetic toy dataset."""

import numpy as np
import pytest

from lighttbnet.core.data import stratified_split
from lighttbnet.core.evaluation import auc, predict_records
from lighttbnet.core.synthetic import make_toy_arrays, toy_model_config
from lighttbnet.core.training import AdamConfig, FocalLossConfig, TrainConfig, train_all_folds


@pytest.mark.slow
def test_toy_ensemble_separates_classes(tmp_path):
    records, images = make_toy_arrays(n_pos=400, n_neg=400, size=64, seed=0)
    scaled = {path: pixels / 255.0 for path, pixels in images.items()}
    source = lambda record: scaled[record.image_path]
    split = stratified_split(records, test_frac=0.2, seed=0)
    config = TrainConfig(epochs=20, batch_size=16, seed=0, adam=AdamConfig(lr=1e-4),
                         focal=FocalLossConfig(gamma=2.0))

    checkpoints = train_all_folds(toy_model_config(64), records, split, source, tmp_path, config)
    assert [c.fold_id for c in checkpoints] == [0, 1, 2, 3, 4]
    for checkpoint in checkpoints:
        assert checkpoint.val_auc >= 0.95, f"fold {checkpoint.fold_id} selected val_auc {checkpoint.val_auc}"

    test_records = split.select(records, "test")
    predictions = predict_records([c.to_model() for c in checkpoints], test_records, source)
    np.testing.assert_allclose(predictions.ensemble, np.mean(predictions.fold_scores, axis=0), atol=1e-7)
    best_single = max(auc(scores, predictions.labels) for scores in predictions.fold_scores)
    assert auc(predictions.ensemble, predictions.labels) >= best_single - 0.02
