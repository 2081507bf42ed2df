"""Victim classifiers: build, train, update online, probe, and diff posteriors.

Handles are immutable from the caller's perspective: training and updating
return new handles and never touch the input. All stochastic steps are
seeded so runs are bit-reproducible.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .container import load_container, save_container
from .datasets import LabeledDataset
from .errors import ConfigurationError, UsageError
from .seeding import derive_seed, rng, seed_torch

DEFAULT_LR = 1e-3
_PROBE_BATCH = 256


class _MnistCnn(nn.Module):
    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 10, kernel_size=5)
        self.conv2 = nn.Conv2d(10, 20, kernel_size=5)
        self.fc1 = nn.Linear(320, 50)
        self.fc2 = nn.Linear(50, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.fc1(x.flatten(1)))
        return self.fc2(x)


class _CifarCnn(nn.Module):
    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 6, kernel_size=5)
        self.conv2 = nn.Conv2d(6, 16, kernel_size=5)
        self.fc1 = nn.Linear(400, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.fc1(x.flatten(1)))
        x = F.relu(self.fc2(x))
        return self.fc3(x)


class _CheckinMlp(nn.Module):
    def __init__(self, num_classes: int = 9, input_dim: int = 168):
        super().__init__()
        self.fc1 = nn.Linear(input_dim, 32)
        self.fc2 = nn.Linear(32, 16)
        self.fc3 = nn.Linear(16, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.fc3(x)


class _CheckinMlpSmall(nn.Module):
    """Transferability variant: one hidden layer removed, half-width hidden."""

    def __init__(self, num_classes: int = 9, input_dim: int = 168):
        super().__init__()
        self.fc1 = nn.Linear(input_dim, 16)
        self.fc2 = nn.Linear(16, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


# arch_id -> (module factory, default output width, expected sample shape)
_ARCHS: dict[str, tuple[type, int, tuple[int, ...]]] = {
    "mnist_cnn": (_MnistCnn, 10, (1, 28, 28)),
    "cifar_cnn": (_CifarCnn, 10, (3, 32, 32)),
    "checkin_mlp": (_CheckinMlp, 9, (168,)),
    "checkin_mlp_small": (_CheckinMlpSmall, 9, (168,)),
}


@dataclass
class ClassifierHandle:
    """A classifier plus its architecture id and training provenance."""

    arch_id: str
    module: nn.Module
    num_classes: int
    training_meta: dict[str, Any] = field(default_factory=dict)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return _ARCHS[self.arch_id][2]

    def clone(self) -> "ClassifierHandle":
        return ClassifierHandle(
            arch_id=self.arch_id,
            module=copy.deepcopy(self.module),
            num_classes=self.num_classes,
            training_meta=copy.deepcopy(self.training_meta),
        )


@dataclass
class PosteriorMatrix:
    """Stacked posteriors for one probing set, tagged with its fingerprint."""

    rows: np.ndarray  # (n_probe, num_classes)
    probe_fingerprint: str
    normalized: bool = True

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise UsageError("posterior matrix must be 2-D")
        if self.rows.min() < 0.0:
            raise UsageError("posterior entries must be non-negative")
        if self.normalized:
            sums = self.rows.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-5):
                raise UsageError("posterior rows must sum to 1 within 1e-5")


@dataclass
class DeltaVector:
    """Flattened posterior difference: the attack input."""

    values: np.ndarray  # (n_probe * num_classes,)
    probe_fingerprint: str
    entry_bound: float = 1.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 1:
            raise UsageError("delta vector must be flat")
        if not np.all(np.isfinite(self.values)):
            raise UsageError("delta vector contains non-finite entries")
        if np.abs(self.values).max(initial=0.0) > self.entry_bound + 1e-6:
            raise UsageError("delta entries exceed the posterior range")

    def __len__(self) -> int:
        return len(self.values)


def probe_fingerprint(samples: np.ndarray) -> str:
    digest = hashlib.sha256(np.ascontiguousarray(samples).tobytes())
    return digest.hexdigest()[:16]


def build_classifier(arch_id: str, seed: int,
                     num_classes: int | None = None) -> ClassifierHandle:
    """Instantiate a victim architecture with seed-deterministic weights."""
    if arch_id not in _ARCHS:
        raise UsageError(f"unknown arch_id {arch_id!r}; known: {sorted(_ARCHS)}")
    factory, default_classes, _ = _ARCHS[arch_id]
    n_out = default_classes if num_classes is None else int(num_classes)
    seed_torch(derive_seed(seed, 0x1017))
    module = factory(num_classes=n_out)
    meta = {"arch_id": arch_id, "init_seed": int(seed), "num_classes": n_out, "phases": []}
    return ClassifierHandle(arch_id=arch_id, module=module, num_classes=n_out,
                            training_meta=meta)


def _check_shapes(handle: ClassifierHandle, ds: LabeledDataset, what: str) -> None:
    if ds.sample_shape != handle.input_shape:
        raise UsageError(
            f"{what} feature shape {ds.sample_shape} does not match "
            f"{handle.arch_id} input {handle.input_shape}")


def _run_epochs(module: nn.Module, ds: LabeledDataset, epochs: int,
                batch_size: int, lr: float, seed: int) -> None:
    seed_torch(derive_seed(seed, 0x7121))
    order_rng = rng(seed, 0xBA7C)
    xs = torch.from_numpy(ds.samples)
    ys = torch.from_numpy(ds.labels)
    optimizer = torch.optim.Adam(module.parameters(), lr=lr)
    module.train()
    for _ in range(epochs):
        order = order_rng.permutation(len(ds))
        for start in range(0, len(ds), batch_size):
            idx = order[start:start + batch_size]
            optimizer.zero_grad()
            logits = module(xs[idx])
            loss = F.cross_entropy(logits, ys[idx])
            loss.backward()
            optimizer.step()


def train_classifier(model: ClassifierHandle, train: LabeledDataset, epochs: int,
                     batch_size: int, lr: float = DEFAULT_LR,
                     seed: int | None = None) -> ClassifierHandle:
    """Train with cross-entropy + Adam; returns a new handle, input untouched.

    Zero epochs returns a bitwise-identical copy, which keeps no-op phases
    cheap to reason about in the pipeline.
    """
    if len(train) == 0:
        raise ConfigurationError("training set is empty")
    _check_shapes(model, train, "training")
    out = model.clone()
    seed = model.training_meta.get("init_seed", 0) if seed is None else seed
    if epochs > 0:
        _run_epochs(out.module, train, epochs, batch_size, lr, seed)
    out.training_meta["phases"].append({
        "kind": "train", "epochs": int(epochs), "batch_size": int(batch_size),
        "lr": float(lr), "optimizer": "adam", "seed": int(seed),
        "num_samples": len(train), "dataset": train.name,
    })
    return out


def update_classifier(model: ClassifierHandle, update_set: LabeledDataset,
                      update_epochs: int = 1, batch_size: int = 64,
                      lr: float = DEFAULT_LR, seed: int | None = None) -> ClassifierHandle:
    """Online update: continue optimization from the current parameters.

    Optimizer state is fresh per update run; the input handle is never
    mutated, so one base model can fan out to many updated variants.
    """
    if len(update_set) == 0:
        raise ConfigurationError("updating set is empty")
    _check_shapes(model, update_set, "updating")
    out = model.clone()
    seed = model.training_meta.get("init_seed", 0) if seed is None else seed
    if update_epochs > 0:
        _run_epochs(out.module, update_set, update_epochs, batch_size, lr, seed)
    out.training_meta["phases"].append({
        "kind": "update", "epochs": int(update_epochs), "batch_size": int(batch_size),
        "lr": float(lr), "optimizer": "adam", "seed": int(seed),
        "num_samples": len(update_set),
    })
    return out


def probe(model: ClassifierHandle, probe_set: LabeledDataset) -> PosteriorMatrix:
    """Query the model with every probing sample; rows follow probe order."""
    _check_shapes(model, probe_set, "probing")
    model.module.eval()
    outputs = []
    with torch.no_grad():
        xs = torch.from_numpy(probe_set.samples)
        for start in range(0, len(probe_set), _PROBE_BATCH):
            logits = model.module(xs[start:start + _PROBE_BATCH])
            outputs.append(F.softmax(logits, dim=1).numpy())
    rows = np.concatenate(outputs) if outputs else np.zeros((0, model.num_classes), np.float32)
    return PosteriorMatrix(rows=rows, probe_fingerprint=probe_fingerprint(probe_set.samples))


def posterior_difference(before: PosteriorMatrix, after: PosteriorMatrix) -> DeltaVector:
    """before minus after, flattened row-major (probe sample, then class)."""
    if before.probe_fingerprint != after.probe_fingerprint:
        raise UsageError("posterior matrices come from different probing sets")
    if before.rows.shape != after.rows.shape:
        raise UsageError("posterior matrices differ in shape")
    values = (before.rows - after.rows).reshape(-1)
    bound = 1.0
    if not (before.normalized and after.normalized):
        bound = float(max(before.rows.max(initial=0.0), after.rows.max(initial=0.0), 1.0))
    return DeltaVector(values=values, probe_fingerprint=before.probe_fingerprint,
                       entry_bound=bound)


# ---------------------------------------------------------------------------
# checkpoints

def save_classifier(handle: ClassifierHandle, path: str | Path) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in handle.module.state_dict().items()}
    meta = {
        "arch_id": handle.arch_id,
        "num_classes": handle.num_classes,
        "training_meta": handle.training_meta,
    }
    save_container(path, "classifier", meta, arrays)


def load_classifier(path: str | Path) -> ClassifierHandle:
    kind, meta, arrays = load_container(path)
    if kind != "classifier":
        raise UsageError(f"expected a classifier checkpoint, found {kind!r}: {path}")
    handle = build_classifier(meta["arch_id"], seed=0, num_classes=meta["num_classes"])
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    handle.module.load_state_dict(state)
    handle.training_meta = meta["training_meta"]
    return handle
