"""Loss, Adam, and the few-shot training protocol.

One run = one (config, dataset, seed) triple: draw the per-class
few-shot subset, initialise the model, train a fixed number of epochs
with Adam, then evaluate the final model on the subset and the full
test split.  A single seeded generator drives subset selection; a
second stream (same seed) drives init, epoch shuffles, and any patch
shuffling, interleaved in a fixed order, so records are bitwise
reproducible.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .data import DatasetSplit, TASK_BINARY, few_shot_sample, to_model_input
from .metrics import (
    PredictionSet,
    accuracy,
    macro_f1,
    roc_auc,
    threshold_accuracy,
)
from .model import (
    ConfigError,
    ModelConfig,
    ModelParams,
    count_params,
    forward,
    init_params,
)
from .rng import Rng
from .tensor import (
    NumericError,
    Tape,
    Tensor,
    backward,
    concat_rows,
    log_softmax,
    pick_rows,
    reshape,
    scale,
    sum_all,
)

DEFAULT_SEEDS = (3, 5, 7, 11, 13)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainProtocol:
    shots_per_class: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    epochs: int = 23
    seed: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.shots_per_class < 1:
            raise ValueError("shots_per_class must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def with_seed(self, seed: int) -> "TrainProtocol":
        return replace(self, seed=seed)

    def to_json_dict(self) -> dict:
        return {
            "shots_per_class": self.shots_per_class,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "seed": self.seed,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "TrainProtocol":
        return cls(**raw)


def config_id(config: ModelConfig) -> str:
    """Short content hash of the canonical config JSON; used in filenames."""
    digest = hashlib.sha256(config.to_json().encode("utf-8")).hexdigest()
    return digest[:12]


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of labels under softmax(logits [B, K])."""
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be [B, K], got {logits.shape}")
    batch, classes = logits.shape
    labels = [int(l) for l in labels]
    if len(labels) != batch:
        raise ValueError(f"{batch} logit rows but {len(labels)} labels")
    for l in labels:
        if not 0 <= l < classes:
            raise ValueError(f"label {l} out of range for {classes} classes")
    picked = pick_rows(log_softmax(logits, axis=-1), labels)
    return scale(sum_all(picked), -1.0 / batch)


class AdamState:
    """First/second moment buffers and the shared step counter."""

    def __init__(self, params: ModelParams):
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        for name, tensor in params.named_tensors():
            self.m[name] = np.zeros_like(tensor.data)
            self.v[name] = np.zeros_like(tensor.data)


def adam_step(params: ModelParams, state: AdamState, protocol: TrainProtocol) -> None:
    """One bias-corrected Adam update from the gradients stored on params.

    Tensors without a gradient this step are treated as zero-gradient
    (their moments decay but, from rest, they do not move).
    """
    state.t += 1
    b1, b2 = protocol.beta1, protocol.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for name, tensor in params.named_tensors():
        if name not in state.m:
            raise ValueError(f"optimizer state is missing {name!r}")
        m, v = state.m[name], state.v[name]
        if m.shape != tensor.data.shape:
            raise ValueError(
                f"state shape {m.shape} does not match {name!r} {tensor.data.shape}"
            )
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if g.shape != tensor.data.shape:
            raise ValueError(f"gradient shape mismatch on {name!r}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (protocol.learning_rate / corr1) * m / (
            np.sqrt(v / corr2) + protocol.eps
        )
        tensor.data -= update
        if not np.all(np.isfinite(tensor.data)):
            raise NumericError(f"non-finite values in {name!r} after update")


@dataclass
class RunRecord:
    config: ModelConfig
    dataset_id: str
    seed: int
    protocol: TrainProtocol
    epoch_losses: List[float]
    train_metrics: Dict[str, float]
    test_metrics: Dict[str, float]
    param_count: int
    wall_seconds: float
    task_kind: str = TASK_BINARY

    @property
    def primary_metric(self) -> str:
        return "auc" if self.task_kind == TASK_BINARY else "macro_f1"

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config_id": config_id(self.config),
            "config": json.loads(self.config.to_json()),
            "dataset": self.dataset_id,
            "seed": self.seed,
            "protocol": self.protocol.to_json_dict(),
            "task_kind": self.task_kind,
            "primary_metric": self.primary_metric,
            "epoch_losses": list(self.epoch_losses),
            "train_metrics": dict(self.train_metrics),
            "test_metrics": dict(self.test_metrics),
            "param_count": self.param_count,
            "wall_seconds": self.wall_seconds,
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "RunRecord":
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported run record schema {raw.get('schema_version')!r}"
            )
        return cls(
            config=ModelConfig.from_json(json.dumps(raw["config"])),
            dataset_id=raw["dataset"],
            seed=raw["seed"],
            protocol=TrainProtocol.from_json_dict(raw["protocol"]),
            epoch_losses=[float(x) for x in raw["epoch_losses"]],
            train_metrics={k: float(v) for k, v in raw["train_metrics"].items()},
            test_metrics={k: float(v) for k, v in raw["test_metrics"].items()},
            param_count=int(raw["param_count"]),
            wall_seconds=float(raw["wall_seconds"]),
            task_kind=raw["task_kind"],
        )


def generalization_gap(record: RunRecord) -> float:
    """Train primary metric minus test primary metric; positive = overfit."""
    name = record.primary_metric
    return record.train_metrics[name] - record.test_metrics[name]


def _np_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def _predict_probs(
    params: ModelParams,
    config: ModelConfig,
    images: Iterable[np.ndarray],
    n: int,
    rng: Optional[Rng],
) -> np.ndarray:
    probs = np.empty((n, config.num_classes))
    count = 0
    for i, arr in enumerate(images):
        logits = forward(Tensor(arr), params, config, rng=rng)
        probs[i] = _np_softmax(logits.data)
        count += 1
    if count != n:
        raise ValueError(f"expected {n} images, got {count}")
    return probs


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    images: Iterable[np.ndarray],
    labels: np.ndarray,
    task_kind: str,
    rng: Optional[Rng] = None,
) -> Dict[str, float]:
    """Metric dict for preprocessed images (any iterable, consumed lazily):
    accuracy and macro F1 always, plus ranking AUC and tau=0.5 threshold
    accuracy on binary tasks."""
    labels = np.asarray(labels, dtype=np.int64)
    pred = PredictionSet(
        scores=_predict_probs(params, config, images, len(labels), rng),
        labels=labels,
        task_kind=task_kind,
    )
    out = {"accuracy": accuracy(pred), "macro_f1": macro_f1(pred)}
    if task_kind == TASK_BINARY:
        out["auc"] = roc_auc(pred)
        out["threshold_accuracy"] = threshold_accuracy(pred, 0.5)
    return out


def _check_compatible(config: ModelConfig, split: DatasetSplit, role: str) -> None:
    if split.channels != config.channels:
        raise ConfigError(
            f"{role} split has {split.channels} channels, config wants {config.channels}"
        )
    if split.class_count != config.num_classes:
        raise ConfigError(
            f"{role} split has {split.class_count} classes, config wants {config.num_classes}"
        )


def run_protocol(
    split_train: DatasetSplit,
    split_test: DatasetSplit,
    config: ModelConfig,
    protocol: TrainProtocol,
    dataset_id: str = "dataset",
) -> RunRecord:
    """Execute the few-shot protocol once, deterministically.

    RNG stream order (one stream per concern, both seeded from the run
    seed): the subset draw uses its own stream; the run stream is then
    consumed by parameter init, per-epoch shuffles interleaved with any
    patch-shuffle permutations, and finally the train-then-test
    evaluation passes.
    """
    _check_compatible(config, split_train, "train")
    _check_compatible(config, split_test, "test")
    started = time.perf_counter()

    sample = few_shot_sample(split_train, protocol.shots_per_class, protocol.seed)
    subset = sample.subset()
    train_images = [
        to_model_input(subset.images[i], config.input_size) for i in range(subset.n)
    ]
    train_labels = subset.labels.astype(np.int64)

    rng = Rng(protocol.seed)
    params = init_params(config, rng)
    state = AdamState(params)

    n = len(train_images)
    epoch_losses: List[float] = []
    for _ in range(protocol.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, protocol.batch_size):
            chunk = order[start : start + protocol.batch_size]
            with Tape() as tape:
                rows = []
                for i in chunk:
                    logits = forward(Tensor(train_images[i]), params, config, rng=rng)
                    rows.append(reshape(logits, (1, config.num_classes)))
                loss = cross_entropy(
                    concat_rows(rows), [train_labels[i] for i in chunk]
                )
            backward(loss, tape)
            adam_step(params, state, protocol)
            params.zero_grad()
            loss_sum += loss.item() * len(chunk)
        epoch_losses.append(loss_sum / n)

    train_metrics = evaluate(
        params, config, train_images, train_labels, split_train.task_kind, rng
    )
    test_metrics = evaluate(
        params,
        config,
        (
            to_model_input(split_test.images[i], config.input_size)
            for i in range(split_test.n)
        ),
        split_test.labels.astype(np.int64),
        split_test.task_kind,
        rng,
    )

    return RunRecord(
        config=config,
        dataset_id=dataset_id,
        seed=protocol.seed,
        protocol=protocol,
        epoch_losses=epoch_losses,
        train_metrics=train_metrics,
        test_metrics=test_metrics,
        param_count=count_params(config),
        wall_seconds=time.perf_counter() - started,
        task_kind=split_train.task_kind,
    )
