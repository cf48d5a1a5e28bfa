#!/usr/bin/env python3
"""
Training, evaluation and experiment orchestration.

One training run is single-threaded: conversations are shuffled per epoch,
grouped into batches of whole conversations, and each batch takes one Adam
step on the utterance-weighted mean of L_EC. The multi-seed runner executes
independent runs on worker threads.
"""

import copy
import logging
import os
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix, f1_score, precision_recall_fscore_support

from . import tensor as T
from .checkpoint import read_checkpoint, write_checkpoint
from .dataio import Conversation, Corpus
from .eae import DISTANCE_MODES
from .errors import (
    CheckpointError,
    CompatibilityError,
    ConfigError,
    NonFiniteLossError,
    TrainingDataError,
)
from .loss import FGV_NORMS, LossConfig, objective
from .model import HcanModel

logger = logging.getLogger(__name__)

ABLATIONS = ("no_ece", "no_eae", "no_kl", "no_adv")
ABLATION_LABELS = {
    "full": "HCAN",
    "no_ece": "w/o ECE",
    "no_eae": "w/o EAE",
    "no_kl": "w/o KL",
    "no_adv": "w/o L_adv",
}
PRECISIONS = {32: np.float32, 64: np.float64}

# Per-benchmark settings for the three ERC corpora, plus the optimizer settings
# that fit the default synthetic corpus inside the default 30 epochs
DATASET_PRESETS: Dict[str, Dict[str, Any]] = {
    "iemocap": {"lstm_layers": 2, "alpha": 0.1, "beta": 0.05},
    "meld": {"lstm_layers": 1, "alpha": 0.2, "beta": 0.05},
    "emorynlp": {"lstm_layers": 1, "alpha": 0.2, "beta": 0.05},
    "synthetic": {"learning_rate": 1e-3, "batch_size": 8},
}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    dropout: float = 0.2
    lstm_layers: int = 1
    ece_heads: int = 8
    ia_heads: int = 4
    alpha: float = 0.2
    beta: float = 0.05
    epsilon: float = 0.1
    fgv_norm: str = "global"
    distance_mode: str = "index"
    scale_ia_logits: bool = True
    epochs: int = 30
    patience: int = 10
    seed: int = 0
    grad_clip_norm: float = 5.0
    precision: int = 32
    ablations: Tuple[str, ...] = ()

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for key in ("batch_size", "lstm_layers", "ece_heads", "ia_heads", "patience"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.grad_clip_norm <= 0:
            raise ConfigError(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.fgv_norm not in FGV_NORMS:
            raise ConfigError(f"fgv_norm must be one of {', '.join(FGV_NORMS)}, got '{self.fgv_norm}'")
        if self.distance_mode not in DISTANCE_MODES:
            raise ConfigError(f"distance_mode must be one of {', '.join(DISTANCE_MODES)}, got '{self.distance_mode}'")
        unknown = [a for a in self.ablations if a not in ABLATIONS]
        if unknown:
            raise ConfigError(f"unknown ablation switch {unknown[0]!r} (expected one of {', '.join(ABLATIONS)})")
        self.loss_config().validate()

    @property
    def dtype(self) -> Any:
        return PRECISIONS[self.precision]

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.alpha,
            beta=self.beta,
            epsilon=self.epsilon,
            fgv_norm=self.fgv_norm,
            ablate_kl="no_kl" in self.ablations,
            ablate_adv="no_adv" in self.ablations,
            ablate_eae="no_eae" in self.ablations,
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["ablations"] = list(self.ablations)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {', '.join(unknown)}")
        values = dict(data)
        if "ablations" in values:
            values["ablations"] = tuple(values["ablations"])
        return cls(**values)


def build_model(feature_dim: int, num_labels: int, config: TrainConfig) -> HcanModel:
    return HcanModel(
        feature_dim,
        num_labels,
        lstm_layers=config.lstm_layers,
        ece_heads=config.ece_heads,
        ia_heads=config.ia_heads,
        dropout=config.dropout,
        distance_mode=config.distance_mode,
        scale_ia_logits=config.scale_ia_logits,
        no_ece="no_ece" in config.ablations,
        no_eae="no_eae" in config.ablations,
        seed=config.seed,
        dtype=config.dtype,
    )


# Optimization

class AdamOptimizer:
    """
    Adaptive-moment updates over named parameters.

    A parameter whose gradient is entirely zero is skipped for that step,
    moments included, so untouched weights never drift.
    """

    def __init__(self, named_params: Sequence[Tuple[str, T.Tensor]], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            g = p.grad
            if not np.any(g):
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)

    def state(self) -> Dict[str, Any]:
        return {
            "step": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state(self, state: Dict[str, Any]) -> None:
        for key in ("m", "v"):
            missing = sorted(set(getattr(self, key)) - set(state[key]))
            if missing:
                raise CheckpointError(f"optimizer state lacks {key} for {', '.join(missing)}")
        self.step_count = int(state["step"])
        for name, p in self.params:
            self.m[name] = np.array(state["m"][name], dtype=p.dtype)
            self.v[name] = np.array(state["v"][name], dtype=p.dtype)


def clip_grad_norm(params: Sequence[T.Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(np.sum([np.sum(np.square(p.grad, dtype=np.float64)) for p in params])))
    if total > max_norm:
        factor = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= factor
    return total


# Metrics

@dataclass
class Metrics:
    weighted_f1: float
    accuracy: float
    per_class_f1: List[float]
    per_class_precision: List[float]
    per_class_recall: List[float]
    support: List[int]
    confusion_matrix: List[List[int]]
    num_utterances: int

    def to_dict(self, label_set: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        data = {"schema": "hcan-metrics-v1", **asdict(self)}
        if label_set is not None:
            data["labels"] = list(label_set)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Metrics":
        return cls(**{f.name: data[f.name] for f in fields(cls)})


def compute_metrics(y_true: Sequence[int], y_pred: Sequence[int], num_labels: int) -> Metrics:
    """Per-class and support-weighted scores; 0/0 counts as 0."""
    labels = list(range(num_labels))
    if len(y_true) == 0:
        zeros = [0.0] * num_labels
        return Metrics(0.0, 0.0, zeros, list(zeros), list(zeros), [0] * num_labels,
                       [[0] * num_labels for _ in labels], 0)
    precision, recall, f1, support = precision_recall_fscore_support(
        y_true, y_pred, labels=labels, average=None, zero_division=0
    )
    weighted = f1_score(y_true, y_pred, labels=labels, average="weighted", zero_division=0)
    return Metrics(
        weighted_f1=float(weighted),
        accuracy=float(accuracy_score(y_true, y_pred)),
        per_class_f1=[float(x) for x in f1],
        per_class_precision=[float(x) for x in precision],
        per_class_recall=[float(x) for x in recall],
        support=[int(x) for x in support],
        confusion_matrix=confusion_matrix(y_true, y_pred, labels=labels).tolist(),
        num_utterances=len(y_true),
    )


def predict_labels(model: HcanModel, conversation: Conversation) -> np.ndarray:
    return np.argmax(model.infer(conversation).dists.y_hat.data, axis=1)


def evaluate(model: HcanModel, conversations: Sequence[Conversation], workers: int = 1) -> Metrics:
    """Argmax predictions against gold labels; conversations may be sharded over threads."""
    for conv in conversations:
        if not conv.is_labeled:
            raise TrainingDataError(f"labels required: conversation '{conv.id}' is unlabeled")
    if workers > 1 and len(conversations) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(pool.map(lambda c: predict_labels(model, c), conversations))
    else:
        predictions = [predict_labels(model, c) for c in conversations]
    y_true = [int(x) for conv in conversations for x in conv.labels]
    y_pred = [int(x) for pred in predictions for x in pred]
    return compute_metrics(y_true, y_pred, model.num_labels)


# Training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metrics: Optional[Metrics] = None
    improved: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_metrics": None if self.val_metrics is None else asdict(self.val_metrics),
            "improved": self.improved,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EpochRecord":
        val = data.get("val_metrics")
        return cls(
            epoch=int(data["epoch"]),
            train_loss=float(data["train_loss"]),
            val_metrics=None if val is None else Metrics.from_dict(val),
            improved=bool(data.get("improved", False)),
        )


@dataclass
class TrainingState:
    """Everything needed to continue a run exactly where it stopped."""

    params: Dict[str, np.ndarray]
    best_params: Dict[str, np.ndarray]
    optimizer: Dict[str, Any]
    rng_state: Dict[str, Any]
    epoch: int = 0
    best_f1: Optional[float] = None
    bad_epochs: int = 0
    finished: bool = False
    history: List[EpochRecord] = field(default_factory=list)


@dataclass
class TrainResult:
    model: HcanModel
    history: List[EpochRecord]
    state: TrainingState
    config: TrainConfig

    @property
    def best_val_f1(self) -> Optional[float]:
        return self.state.best_f1


def _train_step(model: HcanModel, optimizer: AdamOptimizer, batch: Sequence[Conversation],
                loss_config: LossConfig, clip: float, rng: np.random.Generator, where: str) -> float:
    params = model.parameters()
    T.zero_grad(params)
    total_utts = sum(len(c) for c in batch)
    batch_loss = 0.0
    for conv in batch:
        weight = len(conv) / total_utts
        with T.Tape():
            components = objective(model, conv, loss_config, training=True, rng=rng)
            value = components.total.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss ({value}) at {where}, conversation '{conv.id}'")
            T.backward(components.total * weight)
        batch_loss += value * weight
    norm = clip_grad_norm(params, clip)
    optimizer.step()
    logger.debug(f"{where}: loss {batch_loss:.4f}, grad norm {norm:.3f}")
    return batch_loss


def train(corpus: Corpus, config: TrainConfig, *, resume: Optional[TrainingState] = None,
          checkpoint_path: Optional[Union[str, Path]] = None,
          stop_after_epoch: Optional[int] = None) -> TrainResult:
    """
    Train HCAN on ``corpus``; returns the best-validation model and the history.

    Args:
        corpus: Corpus whose train split (and val split, if any) is labeled
        config: Hyperparameters; the run is a pure function of corpus, config and seed
        resume: State from a checkpoint to continue from
        checkpoint_path: Rewritten after every epoch when given
        stop_after_epoch: Stop once this many epochs are complete (for interrupted runs)
    """
    config.validate()
    corpus.require_labels("train")
    train_convs = corpus.split("train")
    val_convs = corpus.split("val")
    corpus.require_labels("val")
    if config.epochs > 0 and not train_convs:
        raise TrainingDataError("training split is empty")

    model = build_model(corpus.feature_dim, corpus.num_labels, config)
    optimizer = AdamOptimizer(model.named_parameters(), lr=config.learning_rate)
    rng = np.random.default_rng([config.seed, 1])
    if resume is None:
        initial = model.state_arrays()
        state = TrainingState(params=initial, best_params=initial, optimizer=optimizer.state(),
                              rng_state=copy.deepcopy(rng.bit_generator.state))
    else:
        state = resume
        model.load_state_arrays(state.params)
        optimizer.load_state(state.optimizer)
        rng.bit_generator.state = copy.deepcopy(state.rng_state)
        logger.info(f"Resuming training after epoch {state.epoch}")

    loss_config = config.loss_config()
    start_epoch = state.epoch
    while state.epoch < config.epochs and not state.finished:
        epoch = state.epoch + 1
        order = rng.permutation(len(train_convs))
        loss_sum, utt_sum = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_convs[i] for i in order[start:start + config.batch_size]]
            loss = _train_step(model, optimizer, batch, loss_config, config.grad_clip_norm, rng,
                               where=f"epoch {epoch} batch {b}")
            count = sum(len(c) for c in batch)
            loss_sum += loss * count
            utt_sum += count

        val_metrics = evaluate(model, val_convs) if val_convs else None
        if val_metrics is None:
            improved = True
            state.best_params = model.state_arrays()
        elif state.best_f1 is None or val_metrics.weighted_f1 > state.best_f1:
            improved = True
            state.best_f1 = val_metrics.weighted_f1
            state.best_params = model.state_arrays()
            state.bad_epochs = 0
        else:
            improved = False
            state.bad_epochs += 1

        record = EpochRecord(epoch=epoch, train_loss=loss_sum / utt_sum, val_metrics=val_metrics, improved=improved)
        state.history.append(record)
        state.epoch = epoch
        val_text = "n/a" if val_metrics is None else f"{val_metrics.weighted_f1:.4f}"
        logger.info(f"Epoch {epoch}/{config.epochs}: train loss {record.train_loss:.4f}, val weighted F1 {val_text}")
        if val_metrics is not None and state.bad_epochs >= config.patience:
            state.finished = True
            logger.info(f"Early stopping after {epoch} epochs ({config.patience} without improvement)")

        state.params = model.state_arrays()
        state.optimizer = optimizer.state()
        state.rng_state = copy.deepcopy(rng.bit_generator.state)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, config, corpus.label_set, state)
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            logger.info(f"Stopping after epoch {state.epoch} as requested")
            break

    if checkpoint_path is not None and state.epoch == start_epoch:
        save_checkpoint(checkpoint_path, model, config, corpus.label_set, state)
    model.load_state_arrays(state.best_params)
    return TrainResult(model=model, history=list(state.history), state=state, config=config)


# Checkpoints

@dataclass
class LoadedCheckpoint:
    model: HcanModel
    config: TrainConfig
    label_set: Tuple[str, ...]
    feature_dim: int
    state: Optional[TrainingState] = None

    def check_compatible(self, corpus: Corpus) -> None:
        if corpus.feature_dim != self.feature_dim:
            raise CompatibilityError(
                f"checkpoint expects feature_dim {self.feature_dim}, corpus has {corpus.feature_dim}"
            )
        if tuple(corpus.label_set) != tuple(self.label_set):
            raise CompatibilityError(
                f"checkpoint label set {list(self.label_set)} does not match corpus {list(corpus.label_set)}"
            )


def save_checkpoint(path: Union[str, Path], model: HcanModel, config: TrainConfig,
                    label_set: Sequence[str], state: Optional[TrainingState] = None) -> Path:
    """Persist the inference weights and, when given, the full training state."""
    tensors: Dict[str, np.ndarray] = {}
    best = model.state_arrays() if state is None else state.best_params
    tensors.update({f"best/{name}": arr for name, arr in best.items()})
    trainer_meta = None
    if state is not None:
        tensors.update({f"param/{name}": arr for name, arr in state.params.items()})
        tensors.update({f"adam_m/{name}": arr for name, arr in state.optimizer["m"].items()})
        tensors.update({f"adam_v/{name}": arr for name, arr in state.optimizer["v"].items()})
        trainer_meta = {
            "epoch": state.epoch,
            "best_f1": state.best_f1,
            "bad_epochs": state.bad_epochs,
            "finished": state.finished,
            "optimizer_step": state.optimizer["step"],
            "rng_state": state.rng_state,
            "history": [r.to_dict() for r in state.history],
        }
    manifest = {
        "config": config.to_dict(),
        "feature_dim": model.feature_dim,
        "label_set": list(label_set),
        "trainer": trainer_meta,
    }
    return write_checkpoint(path, manifest, tensors)


def _group(tensors: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {name[len(prefix):]: arr for name, arr in tensors.items() if name.startswith(prefix)}


def load_checkpoint(path: Union[str, Path]) -> LoadedCheckpoint:
    manifest, tensors = read_checkpoint(path)
    try:
        config = TrainConfig.from_dict(manifest["config"])
        config.validate()
        label_set = tuple(manifest["label_set"])
        feature_dim = int(manifest["feature_dim"])
        meta = manifest.get("trainer")
        state = None
        if meta is not None:
            state = TrainingState(
                params=_group(tensors, "param/"),
                best_params=_group(tensors, "best/"),
                optimizer={"step": int(meta["optimizer_step"]),
                           "m": _group(tensors, "adam_m/"), "v": _group(tensors, "adam_v/")},
                rng_state=meta["rng_state"],
                epoch=int(meta["epoch"]),
                best_f1=meta["best_f1"],
                bad_epochs=int(meta["bad_epochs"]),
                finished=bool(meta["finished"]),
                history=[EpochRecord.from_dict(r) for r in meta["history"]],
            )
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise CheckpointError(f"{path}: invalid checkpoint manifest: {e}") from e

    model = build_model(feature_dim, len(label_set), config)
    model.load_state_arrays(_group(tensors, "best/"))
    logger.info(f"Loaded checkpoint {path}: {model}")
    return LoadedCheckpoint(model=model, config=config, label_set=label_set, feature_dim=feature_dim, state=state)


# Inference documents

def predict(model: HcanModel, conversations: Sequence[Conversation], label_set: Sequence[str]) -> Dict[str, Any]:
    """Per-utterance predicted label and full y_hat distribution; labels are optional."""
    docs = []
    for conv in conversations:
        y_hat = model.infer(conv).dists.y_hat.data
        utterances = []
        for i in range(len(conv)):
            k = int(np.argmax(y_hat[i]))
            utterances.append({
                "i": i,
                "speaker": int(conv.speakers[i]),
                "predicted": k,
                "predicted_label": label_set[k],
                "gold": None if conv.labels is None else int(conv.labels[i]),
                "distribution": [float(x) for x in y_hat[i]],
            })
        docs.append({"id": conv.id, "utterances": utterances})
    return {"schema": "hcan-predictions-v1", "labels": list(label_set), "conversations": docs}


def inspect_conversation(model: HcanModel, conversation: Conversation, label_set: Sequence[str]) -> Dict[str, Any]:
    """Plot-ready distributions and attribution trace for one conversation."""
    result = model.infer(conversation)
    dists = result.dists
    rows = result.trace.to_rows() if result.trace is not None else [
        {"i": i, "speaker": int(conversation.speakers[i]), "attended": []} for i in range(len(conversation))
    ]
    for i, row in enumerate(rows):
        row["gold"] = None if conversation.labels is None else int(conversation.labels[i])
        row["d_tmp"] = [float(x) for x in dists.d_tmp.data[i]]
        row["d_src"] = [float(x) for x in dists.d_src.data[i]]
        row["y_hat"] = [float(x) for x in dists.y_hat.data[i]]
    sigma = None if model.no_eae else model.eae.gaussian.sigma
    mu = None if model.no_eae else float(model.eae.gaussian.mu.item())
    return {
        "schema": "hcan-inspect-v1",
        "conversation": conversation.id,
        "labels": list(label_set),
        "gaussian": {"mu": mu, "sigma": sigma},
        "utterances": rows,
    }


# Multi-seed runs

@dataclass
class SeedRunResult:
    seed: int
    success: bool
    started_at: str
    ended_at: str
    duration_sec: float
    test_metrics: Optional[Metrics] = None
    best_val_f1: Optional[float] = None
    epochs_run: int = 0
    error: Optional[str] = None
    result: Optional[TrainResult] = field(default=None, repr=False)

    @property
    def test_f1(self) -> Optional[float]:
        return None if self.test_metrics is None else self.test_metrics.weighted_f1

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "success": self.success,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "duration_sec": self.duration_sec,
            "test_weighted_f1": self.test_f1,
            "test_accuracy": None if self.test_metrics is None else self.test_metrics.accuracy,
            "best_val_f1": self.best_val_f1,
            "epochs_run": self.epochs_run,
            "error": self.error,
        }


def default_workers() -> int:
    value = os.getenv("HCAN_THREADS")
    if value is None:
        return os.cpu_count() or 1
    try:
        workers = int(value)
    except ValueError:
        raise ConfigError(f"HCAN_THREADS must be an integer, got {value!r}")
    if workers < 1:
        raise ConfigError(f"HCAN_THREADS must be positive, got {workers}")
    return workers


def _run_one(corpus: Corpus, config: TrainConfig, seed: int) -> SeedRunResult:
    started = time.time()
    started_at = datetime.now().isoformat()
    try:
        result = train(corpus, replace(config, seed=seed))
        test_convs = corpus.split("test")
        test_metrics = evaluate(result.model, test_convs) if test_convs else None
        return SeedRunResult(
            seed=seed,
            success=True,
            started_at=started_at,
            ended_at=datetime.now().isoformat(),
            duration_sec=time.time() - started,
            test_metrics=test_metrics,
            best_val_f1=result.best_val_f1,
            epochs_run=len(result.history),
            result=result,
        )
    except Exception as e:
        logger.exception(f"Seed {seed} failed: {e}")
        return SeedRunResult(
            seed=seed,
            success=False,
            started_at=started_at,
            ended_at=datetime.now().isoformat(),
            duration_sec=time.time() - started,
            error=str(e),
        )


def run_seeds(corpus: Corpus, config: TrainConfig, seeds: Sequence[int],
              workers: Optional[int] = None) -> List[SeedRunResult]:
    """Train once per seed on worker threads; results come back in ``seeds`` order."""
    config.validate()
    workers = default_workers() if workers is None else workers
    jobs: "queue.Queue[int]" = queue.Queue()
    for seed in seeds:
        jobs.put(seed)
    results: Dict[int, SeedRunResult] = {}
    lock = threading.Lock()

    def worker():
        while True:
            try:
                seed = jobs.get_nowait()
            except queue.Empty:
                return
            logger.info(f"Starting seed {seed}")
            outcome = _run_one(corpus, config, seed)
            with lock:
                results[seed] = outcome
            logger.info(f"Finished seed {seed} in {outcome.duration_sec:.1f}s (success={outcome.success})")

    threads = [threading.Thread(target=worker, daemon=True) for _ in range(max(1, min(workers, len(seeds))))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return [results[seed] for seed in seeds]


def _mean_std(values: Sequence[float]) -> Tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


def seed_summary(results: Sequence[SeedRunResult]) -> Dict[str, Any]:
    f1s = [r.test_f1 for r in results if r.success and r.test_f1 is not None]
    mean, std = _mean_std(f1s)
    return {
        "schema": "hcan-seeds-v1",
        "runs": [r.to_dict() for r in results],
        "mean_test_weighted_f1": mean,
        "std_test_weighted_f1": std,
        "failed": sum(1 for r in results if not r.success),
    }


# Ablations

@dataclass
class AblationRow:
    variant: str
    label: str
    runs: List[SeedRunResult]

    @property
    def f1s(self) -> List[float]:
        return [r.test_f1 for r in self.runs if r.success and r.test_f1 is not None]

    def to_dict(self) -> Dict[str, Any]:
        mean, std = _mean_std(self.f1s)
        return {
            "variant": self.variant,
            "label": self.label,
            "seeds": [r.seed for r in self.runs],
            "test_weighted_f1": self.f1s,
            "mean": mean,
            "std": std,
            "failed": sum(1 for r in self.runs if not r.success),
        }


@dataclass
class AblationTable:
    rows: List[AblationRow]

    def row(self, variant: str) -> AblationRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def to_dict(self) -> Dict[str, Any]:
        return {"schema": "hcan-ablation-v1", "rows": [r.to_dict() for r in self.rows]}


def run_ablation(corpus: Corpus, config: TrainConfig, which: Sequence[str],
                 seeds: Optional[Sequence[int]] = None, workers: Optional[int] = None) -> AblationTable:
    """The full model plus one row per switch in ``which``, each trained over ``seeds``."""
    unknown = [w for w in which if w not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation switch {unknown[0]!r} (expected one of {', '.join(ABLATIONS)})")
    seeds = [config.seed] if seeds is None else list(seeds)
    variants = ["full"] + [a for a in ABLATIONS if a in which]
    rows = []
    for variant in variants:
        variant_config = replace(config, ablations=() if variant == "full" else (variant,))
        logger.info(f"Ablation variant {ABLATION_LABELS[variant]} over seeds {seeds}")
        rows.append(AblationRow(variant, ABLATION_LABELS[variant], run_seeds(corpus, variant_config, seeds, workers)))
    return AblationTable(rows=rows)
