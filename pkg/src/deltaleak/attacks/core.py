"""Label-space attacks: single-sample label inference and multi-sample
label-distribution estimation.

Both share the delta encoder and a one-layer softmax decoder; they differ
only in loss (cross-entropy vs predicted-first KL divergence) and in what
the corpus targets hold.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..container import load_container, save_container
from ..corpus import AttackCorpus
from ..errors import DataError, UsageError
from ..seeding import derive_seed, rng, seed_torch
from ..victims import DeltaVector
from .encoder import LATENT_WIDTH, DeltaEncoder, LatentCode, encode

KL_EPS = 1e-8

DEFAULT_EPOCHS = 50
DEFAULT_LR = 1e-3
DEFAULT_DROPOUT = 0.5
DEFAULT_VAL_FRACTION = 0.1


@dataclass
class LabelPosterior:
    """Per-class probability that the single updating sample has that label."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        self.probs = _check_simplex_vector(self.probs)


@dataclass
class LabelDistribution:
    """Estimated normalized label distribution of an updating set."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        self.probs = _check_simplex_vector(self.probs)


def _check_simplex_vector(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float32)
    if probs.ndim != 1 or probs.min() < 0.0 or abs(float(probs.sum()) - 1.0) > 1e-5:
        raise DataError("probability vector is not on the simplex")
    return probs


@dataclass
class AttackModel:
    """Sealed encoder+decoder pair for one label-space attack."""

    kind: str  # "label_inference" | "label_distribution"
    encoder: DeltaEncoder
    decoder: nn.Module
    num_classes: int
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def input_width(self) -> int:
        return self.encoder.input_width

    def predict_probs(self, deltas: np.ndarray) -> np.ndarray:
        """Batch inference: (n, width) deltas -> (n, C) simplex rows."""
        deltas = np.asarray(deltas, dtype=np.float32)
        if deltas.ndim == 1:
            deltas = deltas[None, :]
        if deltas.shape[1] != self.input_width:
            raise UsageError(
                f"delta width {deltas.shape[1]} does not match model input {self.input_width}")
        self.encoder.eval()
        self.decoder.eval()
        with torch.no_grad():
            logits = self.decoder(self.encoder(torch.from_numpy(deltas)))
            return F.softmax(logits, dim=1).numpy()


def kl_predicted_first(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """sum_i pred_i * log(pred_i / target_i), clamped at KL_EPS, batch mean.

    The asymmetric predicted-first direction is intentional; it is the
    training objective for distribution estimation.
    """
    p = pred.clamp_min(KL_EPS)
    q = target.clamp_min(KL_EPS)
    return (p * (p.log() - q.log())).sum(dim=1).mean()


def _train_jointly(encoder: DeltaEncoder, decoder: nn.Module, deltas: np.ndarray,
                   loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                   targets: torch.Tensor, epochs: int, lr: float,
                   val_fraction: float, batch_size: int, seed: int,
                   patience: int = 5) -> dict[str, Any]:
    """Joint Adam training with an early-stopping validation slice.

    Returns a history record with per-epoch train/val loss; the modules are
    left holding the best-validation weights.
    """
    seed_torch(derive_seed(seed, 0xA77C))
    order_rng = rng(seed, 0x5871)
    n = len(deltas)
    order = order_rng.permutation(n)
    n_val = int(round(n * val_fraction)) if n >= 10 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]

    xs = torch.from_numpy(np.ascontiguousarray(deltas, dtype=np.float32))
    params = list(encoder.parameters()) + list(decoder.parameters())
    optimizer = torch.optim.Adam(params, lr=lr)

    history: dict[str, Any] = {"train_loss": [], "val_loss": []}
    best_val = float("inf")
    best_state = None
    stale = 0
    for _ in range(epochs):
        encoder.train()
        decoder.train()
        epoch_order = order_rng.permutation(len(train_idx))
        total = 0.0
        for start in range(0, len(train_idx), batch_size):
            idx = train_idx[epoch_order[start:start + batch_size]]
            optimizer.zero_grad()
            out = decoder(encoder(xs[idx]))
            loss = loss_fn(out, targets[idx])
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
        history["train_loss"].append(total / max(len(train_idx), 1))

        if n_val:
            encoder.eval()
            decoder.eval()
            with torch.no_grad():
                val_loss = float(loss_fn(decoder(encoder(xs[val_idx])), targets[val_idx]))
            history["val_loss"].append(val_loss)
            if val_loss < best_val - 1e-6:
                best_val = val_loss
                best_state = (copy.deepcopy(encoder.state_dict()),
                              copy.deepcopy(decoder.state_dict()))
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
    if best_state is not None:
        encoder.load_state_dict(best_state[0])
        decoder.load_state_dict(best_state[1])
    encoder.eval()
    decoder.eval()
    return history


def _build_parts(input_width: int, num_classes: int, dropout: float,
                 seed: int) -> tuple[DeltaEncoder, nn.Linear]:
    seed_torch(derive_seed(seed, 0xB11D))
    encoder = DeltaEncoder(input_width, dropout=dropout)
    decoder = nn.Linear(LATENT_WIDTH, num_classes)
    return encoder, decoder


def train_label_inference(corpus: AttackCorpus, epochs: int = DEFAULT_EPOCHS,
                          lr: float = DEFAULT_LR, dropout: float = DEFAULT_DROPOUT,
                          val_fraction: float = DEFAULT_VAL_FRACTION,
                          batch_size: int = 64, seed: int = 0) -> AttackModel:
    """Train the single-sample label attack on a label-projected corpus."""
    if corpus.target_kind != "label":
        raise UsageError("corpus targets must be projected to labels first")
    if np.any(corpus.cardinalities != 1):
        raise UsageError("label inference requires cardinality-1 corpora")
    encoder, decoder = _build_parts(corpus.delta_width, corpus.num_classes, dropout, seed)
    targets = torch.from_numpy(np.asarray(corpus.targets, dtype=np.int64))
    history = _train_jointly(encoder, decoder, corpus.deltas, F.cross_entropy,
                             targets, epochs, lr, val_fraction, batch_size, seed)
    meta = {"arch_id": "ali", "epochs": epochs, "lr": lr, "dropout": dropout,
            "val_fraction": val_fraction, "seed": seed, "history": history,
            "probe_fingerprint": corpus.probe_fingerprint}
    return AttackModel(kind="label_inference", encoder=encoder, decoder=decoder,
                       num_classes=corpus.num_classes, meta=meta)


def infer_label(model: AttackModel, delta: DeltaVector | np.ndarray) -> LabelPosterior:
    if model.kind != "label_inference":
        raise UsageError(f"model of kind {model.kind!r} cannot infer labels")
    values = delta.values if isinstance(delta, DeltaVector) else delta
    return LabelPosterior(probs=model.predict_probs(values)[0])


def train_label_distribution(corpus: AttackCorpus, epochs: int = DEFAULT_EPOCHS,
                             lr: float = DEFAULT_LR, dropout: float = DEFAULT_DROPOUT,
                             val_fraction: float = DEFAULT_VAL_FRACTION,
                             batch_size: int = 64, seed: int = 0,
                             allow_mixed_cardinality: bool = False) -> AttackModel:
    """Train the label-distribution attack with the predicted-first KL loss."""
    if corpus.target_kind != "distribution":
        raise UsageError("corpus targets must be projected to distributions first")
    if not allow_mixed_cardinality and len(np.unique(corpus.cardinalities)) != 1:
        raise UsageError("mixed-cardinality corpus needs allow_mixed_cardinality=True")
    targets_np = np.asarray(corpus.targets, dtype=np.float32)
    if targets_np.min() < 0.0 or np.any(np.abs(targets_np.sum(axis=1) - 1.0) > 1e-5):
        raise DataError("distribution targets must lie on the simplex")
    encoder, decoder = _build_parts(corpus.delta_width, corpus.num_classes, dropout, seed)

    def loss_fn(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return kl_predicted_first(F.softmax(logits, dim=1), target)

    history = _train_jointly(encoder, decoder, corpus.deltas, loss_fn,
                             torch.from_numpy(targets_np), epochs, lr,
                             val_fraction, batch_size, seed)
    meta = {"arch_id": "alde", "epochs": epochs, "lr": lr, "dropout": dropout,
            "val_fraction": val_fraction, "seed": seed, "history": history,
            "probe_fingerprint": corpus.probe_fingerprint}
    return AttackModel(kind="label_distribution", encoder=encoder, decoder=decoder,
                       num_classes=corpus.num_classes, meta=meta)


def estimate_distribution(model: AttackModel,
                          delta: DeltaVector | np.ndarray) -> LabelDistribution:
    if model.kind != "label_distribution":
        raise UsageError(f"model of kind {model.kind!r} cannot estimate distributions")
    values = delta.values if isinstance(delta, DeltaVector) else delta
    return LabelDistribution(probs=model.predict_probs(values)[0])


# ---------------------------------------------------------------------------
# checkpoints

def save_attack_model(model: AttackModel, path: str | Path) -> None:
    arrays = {f"encoder.{k}": v.numpy() for k, v in model.encoder.state_dict().items()}
    arrays.update({f"decoder.{k}": v.numpy() for k, v in model.decoder.state_dict().items()})
    meta = {"kind": model.kind, "num_classes": model.num_classes,
            "input_width": model.input_width, "meta": model.meta}
    save_container(path, "attack-model", meta, arrays)


def load_attack_model(path: str | Path) -> AttackModel:
    kind, meta, arrays = load_container(path)
    if kind != "attack-model":
        raise UsageError(f"expected an attack-model checkpoint, found {kind!r}: {path}")
    dropout = meta["meta"].get("dropout", DEFAULT_DROPOUT)
    encoder = DeltaEncoder(meta["input_width"], dropout=dropout)
    decoder = nn.Linear(LATENT_WIDTH, meta["num_classes"])
    encoder.load_state_dict({k[len("encoder."):]: torch.from_numpy(v)
                             for k, v in arrays.items() if k.startswith("encoder.")})
    decoder.load_state_dict({k[len("decoder."):]: torch.from_numpy(v)
                             for k, v in arrays.items() if k.startswith("decoder.")})
    encoder.eval()
    decoder.eval()
    return AttackModel(kind=meta["kind"], encoder=encoder, decoder=decoder,
                       num_classes=meta["num_classes"], meta=meta["meta"])
