"""Supervised training of partition estimators against exact labels.

The loss is mean squared error between estimated and true ln Z.  Each
gradient step unrolls a fixed number of message-passing iterations (no
gradient flows through any convergence test), backpropagates through the
whole stack, clips the joint gradient norm, and applies one Adam update.
Everything is seeded and iterated in fixed order, so a repeated run yields
bitwise-identical parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .graphs import FactorGraph, load_graph_json
from .layers import BpnnModel


class TrainingError(RuntimeError):
    """Raised when optimization produces a non-finite loss."""


@dataclass(frozen=True)
class LabeledInstance:
    graph: FactorGraph
    ln_z: float | None
    tag: str = ""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 5e-4
    # Multiplicative factors applied to the learning rate at the start of the
    # keyed epoch: {50: 0.5} halves the rate from epoch 50 onward.
    decay: dict[int, float] = field(default_factory=lambda: {50: 0.5})
    batch_size: int | None = None
    clip_norm: float = 10.0
    seed: int = 0
    # For weight-tied models: sample the unroll depth uniformly from this
    # inclusive range for every gradient step.
    k_range: tuple[int, int] | None = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive when given")
        if self.k_range is not None and not 1 <= self.k_range[0] <= self.k_range[1]:
            raise ValueError(f"invalid unroll range {self.k_range}")


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)


def mse_loss(predictions: list[Tensor], targets: np.ndarray) -> Tensor:
    """Mean squared error over per-example scalar predictions."""
    if len(predictions) != len(targets):
        raise ValueError("prediction and target counts differ")
    stacked = ad.concat([ad.reshape(p, (1,)) for p in predictions], axis=0)
    diff = ad.subtract(stacked, Tensor(np.asarray(targets, dtype=np.float64)))
    return ad.scalar_multiply(ad.sum_over(ad.multiply(diff, diff)), 1.0 / len(targets))


def _check_dataset(dataset: list[LabeledInstance]) -> np.ndarray:
    if not dataset:
        raise ValueError("empty training set")
    targets = []
    for index, inst in enumerate(dataset):
        if inst.ln_z is None or not math.isfinite(inst.ln_z):
            raise ValueError(f"instance {index} ({inst.tag!r}) lacks a finite ln Z label")
        targets.append(float(inst.ln_z))
    return np.asarray(targets)


def train(model: BpnnModel, dataset: list[LabeledInstance],
          config: TrainConfig = TrainConfig()) -> TrainHistory:
    """Optimize ``model`` in place; returns per-epoch training losses.

    The recorded loss for an epoch is computed from the forward passes used
    for that epoch's updates, so row 0 is the loss of the initial parameters.
    """
    config.validate()
    targets = _check_dataset(dataset)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    if not params:
        raise ValueError("model has no trainable parameters")
    adam = AdamState(params)
    history = TrainHistory()
    lr = config.lr
    n = len(dataset)
    batch = config.batch_size if config.batch_size is not None else n

    for epoch in range(config.epochs):
        factor = config.decay.get(epoch)
        if factor is not None:
            lr *= factor
        squared_error_sum = 0.0
        for start in range(0, n, batch):
            rows = range(start, min(start + batch, n))
            n_iters = None
            if config.k_range is not None:
                n_iters = int(rng.integers(config.k_range[0], config.k_range[1] + 1))
            tape = Tape()
            predictions = [model.forward(dataset[i].graph, tape, n_iters)[0] for i in rows]
            loss = mse_loss(predictions, targets[list(rows)])
            batch_loss = float(loss.value)
            if not math.isfinite(batch_loss):
                bad = [dataset[i].tag or str(i)
                       for offset, i in enumerate(rows)
                       if not math.isfinite(float(predictions[offset].value))]
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} (instances: {bad or 'unknown'})")
            squared_error_sum += batch_loss * len(rows)
            ad.backward(loss)
            grads = [tape.lift(p).grad for p in params]
            grads = ad.clip_gradients(grads, config.clip_norm)
            ad.adam_step(adam, grads, lr)
        history.losses.append(squared_error_sum / n)
        history.learning_rates.append(lr)
    return history


def evaluate_rmse(model: BpnnModel, dataset: list[LabeledInstance],
                  n_iters: int | None = None) -> float:
    targets = _check_dataset(dataset)
    errors = [model.estimate_ln_z(inst.graph, n_iters) - y
              for inst, y in zip(dataset, targets)]
    return float(np.sqrt(np.mean(np.square(errors))))


def write_loss_csv(history: TrainHistory, handle) -> None:
    handle.write("epoch,train_loss\n")
    for epoch, loss in enumerate(history.losses):
        handle.write(f"{epoch},{loss!r}\n")


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

def save_manifest(entries: list[dict], path) -> None:
    """Write a dataset manifest: a JSON list of {path, ln_z, tag} records."""
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(entries, handle, indent=1)
        handle.write("\n")


def load_manifest_entries(manifest_path) -> list[dict]:
    """Read manifest records: either a bare JSON list or {"instances": [...]}."""
    with open(manifest_path, "r", encoding="utf-8") as handle:
        document = json.load(handle)
    if isinstance(document, dict):
        document = document.get("instances")
    if not isinstance(document, list):
        raise ValueError(f"manifest {manifest_path} must be a JSON list "
                         "or carry an 'instances' list")
    return document


def load_dataset(manifest_path) -> list[LabeledInstance]:
    """Load instances listed in a manifest; graph paths resolve relative to it."""
    manifest_path = Path(manifest_path)
    entries = load_manifest_entries(manifest_path)
    out = []
    for entry in entries:
        graph_path = Path(entry["path"])
        if not graph_path.is_absolute():
            graph_path = manifest_path.parent / graph_path
        ln_z = entry.get("ln_z")
        out.append(LabeledInstance(load_graph_json(graph_path),
                                   None if ln_z is None else float(ln_z),
                                   str(entry.get("tag", ""))))
    return out
