"""Shadow-model factory: mass-produce updated models and attack corpora.

One corpus row is a posterior difference paired with the ground truth of
the updating set that produced it. The base model is probed once; every
row reuses that shared before-probe.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .container import load_container, save_container
from .datasets import LabeledDataset, UpdatingSetBatch
from .errors import DataError, UsageError
from .seeding import derive_seed
from .victims import (ClassifierHandle, DeltaVector, posterior_difference,
                      probe, update_classifier)

log = logging.getLogger(__name__)

TARGET_KINDS = ("indices", "label", "distribution", "samples")


@dataclass
class AttackCorpus:
    """Paired posterior differences and updating-set ground truth.

    ``deltas`` is an (m, probe_size * num_classes) matrix; per-row set
    indices, labels and raw samples are kept as lists so corpora of mixed
    cardinality concatenate cleanly. ``targets`` holds the projection the
    current attack trains against (see :func:`project_targets`).
    """

    deltas: np.ndarray
    set_indices: list[np.ndarray]
    set_labels: list[np.ndarray]
    set_samples: list[np.ndarray]
    cardinalities: np.ndarray
    num_classes: int
    probe_fingerprint: str
    provenance: dict[str, Any] = field(default_factory=dict)
    target_kind: str = "indices"
    targets: Any = None

    def __post_init__(self) -> None:
        self.deltas = np.asarray(self.deltas, dtype=np.float32)
        self.cardinalities = np.asarray(self.cardinalities, dtype=np.int64)
        m = len(self.deltas)
        if not (len(self.set_indices) == len(self.set_labels)
                == len(self.set_samples) == len(self.cardinalities) == m):
            raise UsageError("corpus rows are misaligned")
        if self.target_kind not in TARGET_KINDS:
            raise UsageError(f"unknown target kind {self.target_kind!r}")
        if self.targets is not None and len(self.targets) != m:
            raise UsageError("targets length must equal the number of deltas")

    def __len__(self) -> int:
        return len(self.deltas)

    @property
    def delta_width(self) -> int:
        return self.deltas.shape[1]

    @property
    def cardinality(self) -> int:
        """Uniform cardinality of the corpus; raises on mixed corpora."""
        unique = np.unique(self.cardinalities)
        if len(unique) != 1:
            raise UsageError("corpus mixes cardinalities; inspect .cardinalities")
        return int(unique[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.set_samples[0].shape[1:])


def build_corpus(base_model: ClassifierHandle, update_pool: LabeledDataset,
                 probe_set: LabeledDataset, batch: UpdatingSetBatch,
                 update_epochs: int = 1, seed: int = 0, batch_size: int = 64,
                 lr: float = 1e-3, noise_policy=None,
                 provenance: dict[str, Any] | None = None) -> AttackCorpus:
    """Update a fresh copy of ``base_model`` per set, probe, and collect deltas.

    ``noise_policy`` perturbs every posterior the probed model emits (the
    uniform-noise defense); shadow corpora are built without it.
    """
    if batch.sets.max(initial=0) >= len(update_pool):
        raise UsageError("updating sets index outside the update pool")
    if noise_policy is not None:
        from .defense import noisy_probe
        before = noisy_probe(base_model, probe_set,
                             replace(noise_policy, seed=derive_seed(noise_policy.seed, 0)))
    else:
        before = probe(base_model, probe_set)

    deltas = np.empty((len(batch), before.rows.size), dtype=np.float32)
    set_indices: list[np.ndarray] = []
    set_labels: list[np.ndarray] = []
    set_samples: list[np.ndarray] = []
    for i, idx in enumerate(batch.sets):
        subset = update_pool.subset(idx)
        updated = update_classifier(base_model, subset, update_epochs,
                                    batch_size=batch_size, lr=lr,
                                    seed=derive_seed(seed, i + 1))
        if noise_policy is not None:
            from .defense import noisy_probe
            after = noisy_probe(updated, probe_set,
                                replace(noise_policy, seed=derive_seed(noise_policy.seed, i + 1)))
        else:
            after = probe(updated, probe_set)
        deltas[i] = posterior_difference(before, after).values
        set_indices.append(np.asarray(idx, dtype=np.int64))
        set_labels.append(subset.labels.copy())
        set_samples.append(subset.samples.copy())
        if (i + 1) % 500 == 0:
            log.debug("corpus rows done: %d/%d", i + 1, len(batch))

    prov = {"seed": int(seed), "update_epochs": int(update_epochs),
            "arch_id": base_model.arch_id, "pool": update_pool.name,
            "noisy": noise_policy is not None}
    if provenance:
        prov.update(provenance)
    return AttackCorpus(
        deltas=deltas,
        set_indices=set_indices,
        set_labels=set_labels,
        set_samples=set_samples,
        cardinalities=np.full(len(batch), batch.cardinality, dtype=np.int64),
        num_classes=base_model.num_classes,
        probe_fingerprint=before.probe_fingerprint,
        provenance=prov,
    )


def project_targets(corpus: AttackCorpus, mode: str) -> AttackCorpus:
    """Derive per-row attack targets: single label, label distribution, or
    the raw sample set."""
    if mode == "label":
        if np.any(corpus.cardinalities != 1):
            raise UsageError("label projection requires cardinality 1")
        targets = np.array([int(labs[0]) for labs in corpus.set_labels], dtype=np.int64)
    elif mode == "distribution":
        targets = np.zeros((len(corpus), corpus.num_classes), dtype=np.float64)
        for i, labs in enumerate(corpus.set_labels):
            hist = np.bincount(labs, minlength=corpus.num_classes)
            targets[i] = hist / hist.sum()
        _check_simplex(targets)
    elif mode == "samples":
        targets = [s.copy() for s in corpus.set_samples]
    else:
        raise UsageError(f"unknown projection mode {mode!r}")
    return AttackCorpus(
        deltas=corpus.deltas,
        set_indices=corpus.set_indices,
        set_labels=corpus.set_labels,
        set_samples=corpus.set_samples,
        cardinalities=corpus.cardinalities,
        num_classes=corpus.num_classes,
        probe_fingerprint=corpus.probe_fingerprint,
        provenance=dict(corpus.provenance),
        target_kind=mode,
        targets=targets,
    )


def _check_simplex(rows: np.ndarray) -> None:
    if rows.min() < 0.0 or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-6):
        raise DataError("distribution targets must lie on the probability simplex")


def concat_corpora(corpora: list[AttackCorpus]) -> AttackCorpus:
    """Concatenate corpora row-wise; rows keep their own cardinality tag."""
    if not corpora:
        raise UsageError("no corpora to concatenate")
    first = corpora[0]
    for c in corpora[1:]:
        if c.probe_fingerprint != first.probe_fingerprint:
            raise UsageError("corpora probe fingerprints differ")
        if c.delta_width != first.delta_width:
            raise UsageError("corpora delta widths differ")
    return AttackCorpus(
        deltas=np.concatenate([c.deltas for c in corpora]),
        set_indices=sum((c.set_indices for c in corpora), []),
        set_labels=sum((c.set_labels for c in corpora), []),
        set_samples=sum((c.set_samples for c in corpora), []),
        cardinalities=np.concatenate([c.cardinalities for c in corpora]),
        num_classes=first.num_classes,
        probe_fingerprint=first.probe_fingerprint,
        provenance={"mixed": True, "parts": [c.provenance for c in corpora]},
    )


# ---------------------------------------------------------------------------
# persistence

def save_corpus(corpus: AttackCorpus, path: str | Path) -> None:
    offsets = np.zeros(len(corpus) + 1, dtype=np.int64)
    np.cumsum(corpus.cardinalities, out=offsets[1:])
    arrays = {
        "deltas": corpus.deltas,
        "cardinalities": corpus.cardinalities,
        "row_offsets": offsets,
        "indices_flat": np.concatenate(corpus.set_indices),
        "labels_flat": np.concatenate(corpus.set_labels),
        "samples_flat": np.concatenate(corpus.set_samples),
    }
    meta = {
        "num_classes": corpus.num_classes,
        "probe_fingerprint": corpus.probe_fingerprint,
        "provenance": corpus.provenance,
        "target_kind": "indices",
        "sample_shape": list(corpus.sample_shape),
    }
    save_container(path, "corpus", meta, arrays)


def load_corpus(path: str | Path) -> AttackCorpus:
    kind, meta, arrays = load_container(path)
    if kind != "corpus":
        raise UsageError(f"expected a corpus container, found {kind!r}: {path}")
    offsets = arrays["row_offsets"]
    seams = [slice(int(offsets[i]), int(offsets[i + 1])) for i in range(len(offsets) - 1)]
    return AttackCorpus(
        deltas=arrays["deltas"],
        set_indices=[arrays["indices_flat"][s] for s in seams],
        set_labels=[arrays["labels_flat"][s] for s in seams],
        set_samples=[arrays["samples_flat"][s] for s in seams],
        cardinalities=arrays["cardinalities"],
        num_classes=meta["num_classes"],
        probe_fingerprint=meta["probe_fingerprint"],
        provenance=meta["provenance"],
    )
