"""Focal-loss training with Adam and per-fold checkpoint selection by validation AUC."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple
import math
import os
import pathlib

import numpy as np

from .checkpoint import Checkpoint, fold_checkpoint_path, save_checkpoint
from .data import ImageSource, SampleRecord, SplitAssignment, fold_batches
from .errors import ConfigError, NonFiniteLossError, ShapeError
from .evaluation import classify_and_report, model_scores
from .imaging import AugmentConfig
from .model import LightTBNet, ModelConfig, build
from .tensor import Tensor, clamp, get_default_dtype, log, pick, power, precision
from .utils import logger, make_rng, write_csv

P_CLAMP = 1e-7
TRAIN_LOG_COLUMNS = ("epoch", "train_loss", "val_acc", "val_f1", "val_auc")


@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 2.0

    def validate(self) -> "FocalLossConfig":
        if not self.gamma >= 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")
        return self


@dataclass(frozen=True)
class AdamConfig:
    """Adam hyperparameters; the update is lr * m_hat / (sqrt(v_hat) + eps)."""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> "AdamConfig":
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must be in [0,1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        return self


@dataclass(frozen=True)
class TrainConfig:
    """Epoch budget, batching and seeds for one fold (or all five)."""
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    workers: int = 0
    augment: AugmentConfig = AugmentConfig()
    focal: FocalLossConfig = FocalLossConfig()
    adam: AdamConfig = AdamConfig()

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for batch statistics, got {self.batch_size}")
        if self.workers < 0:
            raise ConfigError(f"workers must be >= 0, got {self.workers}")
        self.augment.validate()
        self.focal.validate()
        self.adam.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def focal_loss(probs: Tensor, targets: Sequence[int], cfg: FocalLossConfig = FocalLossConfig()) -> Tensor:
    """
    Mean over the batch of -(1 - p_t)^gamma * log(p_t).

    Args:
        probs: Row-stochastic class probabilities [B, 2]
        targets: True labels (0 or 1), one per row
        cfg: Focal loss settings

    Returns:
        Scalar loss tensor; p_t is clamped to [1e-7, 1 - 1e-7]
    """
    labels = np.asarray(targets)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(f"focal_loss needs [B,C] probs and [B] targets, got {probs.shape} and {labels.shape}")
    if not np.isin(labels, np.arange(probs.shape[1])).all():
        raise ConfigError(f"invalid labels {sorted(set(labels.tolist()))} for {probs.shape[1]} classes")
    p_t = clamp(pick(probs, labels.astype(np.int64)), P_CLAMP, 1.0 - P_CLAMP)
    nll = -log(p_t)
    if cfg.gamma == 0:
        return nll.mean()
    return (power(1.0 - p_t, cfg.gamma) * nll).mean()


class AdamState:
    """First/second moments per parameter and the shared step counter."""

    def __init__(self, params: Sequence[np.ndarray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              cfg: AdamConfig = AdamConfig()) -> None:
    """
    One Adam update with bias correction, in place on `params`.

    A missing gradient (None) leaves that parameter and its moments alone;
    the step counter always advances.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"adam_step got {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p -= update.astype(p.dtype, copy=False)


class Adam:
    """Adam over a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], cfg: AdamConfig = AdamConfig()):
        self.params = list(params)
        self.cfg = cfg.validate()
        self.state = AdamState([p.data for p in self.params])

    @property
    def t(self) -> int:
        return self.state.t

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_acc: float
    val_f1: float
    val_auc: Optional[float]

    def row(self) -> List[str]:
        auc_text = "" if self.val_auc is None else f"{self.val_auc:.6f}"
        return [str(self.epoch), f"{self.train_loss:.6f}", f"{self.val_acc:.6f}", f"{self.val_f1:.6f}", auc_text]


def fold_seed(seed: int, fold_id: int) -> int:
    """Independent seed for one fold's model initialisation and data order."""
    return int(make_rng(seed, fold_id).integers(0, 2 ** 31 - 1))


class Trainer:
    """
    Trains one fold: fit the model on the other folds, score the held-out
    fold after every epoch and keep the snapshot with the highest
    validation AUC (earliest epoch on ties).
    """

    def __init__(self, model_config: ModelConfig, records: Sequence[SampleRecord], split: SplitAssignment,
                 source: ImageSource, fold_id: int, config: TrainConfig = TrainConfig(),
                 preprocess: Optional[Dict[str, Any]] = None):
        split.check_fold(fold_id)
        self.config = config.validate()
        self.fold_id = fold_id
        self.seed = fold_seed(config.seed, fold_id)
        self.model_config = replace(model_config, seed=self.seed)
        self.records = list(records)
        self.split = split
        self.source = source
        self.preprocess = preprocess or {}
        self.dtype = get_default_dtype()
        self.history: List[EpochLog] = []
        self.val_records = split.select(self.records, "val", fold_id)
        self.train_records = split.select(self.records, "train", fold_id)
        if not self.train_records or not self.val_records:
            raise ConfigError(f"fold {fold_id} has {len(self.train_records)} train and "
                              f"{len(self.val_records)} val records")

    def _train_epoch(self, model: LightTBNet, optimizer: Adam, epoch: int) -> float:
        model.train()
        total, count = 0.0, 0
        for batch in fold_batches(self.records, self.split, self.fold_id, "train", self.source,
                                  self.config.batch_size, self.seed, epoch, self.config.augment, self.config.workers):
            if len(batch) < 2:
                logger.debug(f"fold {self.fold_id} epoch {epoch}: skipping single-sample batch {batch.index}")
                continue
            optimizer.zero_grad()
            probs = model(Tensor(batch.images, dtype=self.dtype))
            loss = focal_loss(probs, batch.labels, self.config.focal)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(value, self.config.adam.lr, epoch, batch.index)
            loss.backward()
            optimizer.step()
            total += value * len(batch)
            count += len(batch)
            logger.debug(f"fold {self.fold_id} epoch {epoch} batch {batch.index}: loss={value:.6f}")
        return total / max(count, 1)

    def _validate(self, model: LightTBNet) -> Tuple[float, float, Optional[float]]:
        scores = model_scores(model, self.val_records, self.source, self.config.batch_size)
        labels = [r.label for r in self.val_records]
        report = classify_and_report(scores, labels)
        if report.auc is None:
            logger.warning(f"fold {self.fold_id}: validation fold has one class, AUC undefined")
        return report.acc, report.f1, report.auc

    def fit(self) -> Checkpoint:
        with precision(self.dtype):
            model = build(self.model_config)
            optimizer = Adam(model.parameters(), self.config.adam)
            best: Optional[Checkpoint] = None
            best_auc = -math.inf
            for epoch in range(1, self.config.epochs + 1):
                train_loss = self._train_epoch(model, optimizer, epoch)
                acc, f1, val_auc = self._validate(model)
                self.history.append(EpochLog(epoch, train_loss, acc, f1, val_auc))
                logger.info(f"fold {self.fold_id} epoch {epoch}/{self.config.epochs}: loss={train_loss:.4f} "
                            f"val_acc={acc:.3f} val_f1={f1:.3f} val_auc={val_auc}")
                score = -math.inf if val_auc is None else val_auc
                if best is None or score > best_auc:
                    best_auc = score
                    best = Checkpoint.from_model(model, fold_id=self.fold_id, epoch=epoch, val_auc=val_auc,
                                                 seed=self.seed, preprocess=self.preprocess,
                                                 extra={"train_config": self.config.to_dict(),
                                                        "val_acc": acc, "val_f1": f1})
        logger.info(f"fold {self.fold_id}: selected epoch {best.epoch} with val_auc={best.val_auc}")
        return best

    def write_log(self, path: os.PathLike) -> pathlib.Path:
        return write_csv(path, TRAIN_LOG_COLUMNS, (entry.row() for entry in self.history))


def train_fold(model_config: ModelConfig, records: Sequence[SampleRecord], split: SplitAssignment,
               source: ImageSource, fold_id: int, config: TrainConfig = TrainConfig(),
               out_dir: Optional[os.PathLike] = None,
               preprocess: Optional[Dict[str, Any]] = None) -> Checkpoint:
    """
    Train one fold and return the selected checkpoint.

    With `out_dir` the checkpoint is saved as fold{k}.ltbn and the epoch log
    as fold{k}_log.csv.
    """
    trainer = Trainer(model_config, records, split, source, fold_id, config, preprocess)
    checkpoint = trainer.fit()
    if out_dir is not None:
        out_dir = pathlib.Path(out_dir)
        save_checkpoint(checkpoint, fold_checkpoint_path(out_dir, fold_id))
        trainer.write_log(out_dir / f"fold{fold_id}_log.csv")
    return checkpoint


def train_all_folds(model_config: ModelConfig, records: Sequence[SampleRecord], split: SplitAssignment,
                    source: ImageSource, out_dir: os.PathLike, config: TrainConfig = TrainConfig(),
                    fold_workers: int = 0, preprocess: Optional[Dict[str, Any]] = None) -> List[Checkpoint]:
    """
    Train every fold of `split` into out_dir.

    Folds run sequentially unless `fold_workers` > 0, in which case they run
    on a thread pool; each fold owns its model, optimizer and seeds.
    """
    folds = list(range(split.n_folds))
    dtype = get_default_dtype()

    def run(fold_id: int) -> Checkpoint:
        with precision(dtype):
            return train_fold(model_config, records, split, source, fold_id, config, out_dir, preprocess)

    if fold_workers > 0:
        with ThreadPoolExecutor(max_workers=fold_workers, thread_name_prefix="ltbn-fold") as pool:
            return list(pool.map(run, folds))
    return [run(k) for k in folds]
