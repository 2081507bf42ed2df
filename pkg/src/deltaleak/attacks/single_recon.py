"""Single-sample reconstruction: autoencoder pretraining, decoder transfer,
and joint MSE fine-tuning against posterior differences.

The autoencoder is trained on shadow data only. Its decoder seeds the
attack's decoder; a bridge layer maps the 64-dim delta latent onto the
autoencoder latent width, and the whole stack fine-tunes end to end.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..container import load_container, save_container
from ..corpus import AttackCorpus
from ..datasets import LabeledDataset
from ..errors import UsageError
from ..seeding import derive_seed, rng, seed_torch
from ..victims import DeltaVector
from .encoder import LATENT_WIDTH, DeltaEncoder


class _MnistAeEncoder(nn.Module):
    def __init__(self, dropout: float = 0.2):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, 3)
        self.conv2 = nn.Conv2d(16, 8, 3)
        self.fc1 = nn.Linear(200, 15)
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(15, 10)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = self.drop(F.relu(self.fc1(x.flatten(1))))
        return F.relu(self.fc2(x))


class _MnistAeDecoder(nn.Module):
    def __init__(self, dropout: float = 0.2):
        super().__init__()
        self.fc1 = nn.Linear(10, 15)
        self.fc2 = nn.Linear(15, 32)
        self.drop = nn.Dropout(dropout)
        self.ct1 = nn.ConvTranspose2d(8, 16, 3, stride=2)
        self.ct2 = nn.ConvTranspose2d(16, 8, 5, stride=2, output_padding=1)
        self.ct3 = nn.ConvTranspose2d(8, 1, 2, stride=2)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fc1(z))
        x = self.drop(F.relu(self.fc2(x)))
        x = x.view(-1, 8, 2, 2)
        x = F.relu(self.ct1(x))
        x = F.relu(self.ct2(x))
        # tanh output remapped onto the [0, 1] feature range
        return (torch.tanh(self.ct3(x)) + 1.0) / 2.0


class _CifarAeEncoder(nn.Module):
    def __init__(self, dropout: float = 0.2):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 32, 3)
        self.conv2 = nn.Conv2d(32, 16, 3)
        self.fc1 = nn.Linear(576, 50)
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(50, 30)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = self.drop(F.relu(self.fc1(x.flatten(1))))
        return F.relu(self.fc2(x))


class _CifarAeDecoder(nn.Module):
    def __init__(self, dropout: float = 0.2):
        super().__init__()
        self.fc1 = nn.Linear(30, 50)
        self.fc2 = nn.Linear(50, 64)
        self.drop = nn.Dropout(dropout)
        self.ct1 = nn.ConvTranspose2d(16, 32, 3, stride=2, output_padding=1)
        self.ct2 = nn.ConvTranspose2d(32, 16, 5, stride=2)
        self.ct3 = nn.ConvTranspose2d(16, 3, 4, stride=2)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fc1(z))
        x = self.drop(F.relu(self.fc2(x)))
        x = x.view(-1, 16, 2, 2)
        x = F.relu(self.ct1(x))
        x = F.relu(self.ct2(x))
        return (torch.tanh(self.ct3(x)) + 1.0) / 2.0


class _CheckinAeEncoder(nn.Module):
    def __init__(self, dropout: float = 0.2, input_dim: int = 168):
        super().__init__()
        widths = [input_dim, 64, 32, 16]
        self.hidden = nn.ModuleList(nn.Linear(widths[i], widths[i + 1]) for i in range(3))
        self.norms = nn.ModuleList(nn.BatchNorm1d(w) for w in widths[1:])
        self.drop = nn.Dropout(dropout)
        self.out = nn.Linear(16, 16)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer, norm in zip(self.hidden, self.norms):
            x = self.drop(F.elu(norm(layer(x))))
        return self.out(x)


class _CheckinAeDecoder(nn.Module):
    def __init__(self, dropout: float = 0.2, output_dim: int = 168):
        super().__init__()
        widths = [16, 16, 32, 64]
        self.hidden = nn.ModuleList(nn.Linear(widths[i], widths[i + 1]) for i in range(3))
        self.norms = nn.ModuleList(nn.BatchNorm1d(w) for w in widths[1:])
        self.drop = nn.Dropout(dropout)
        self.out = nn.Linear(64, output_dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        for layer, norm in zip(self.hidden, self.norms):
            z = self.drop(F.elu(norm(layer(z))))
        return self.out(z)


# arch -> (encoder cls, decoder cls, latent width, sample shape)
AE_ARCHS: dict[str, tuple[type, type, int, tuple[int, ...]]] = {
    "mnist_ae": (_MnistAeEncoder, _MnistAeDecoder, 10, (1, 28, 28)),
    "cifar_ae": (_CifarAeEncoder, _CifarAeDecoder, 30, (3, 32, 32)),
    "checkin_ae": (_CheckinAeEncoder, _CheckinAeDecoder, 16, (168,)),
}


def infer_ae_arch(sample_shape: tuple[int, ...]) -> str:
    for arch, (_, _, _, shape) in AE_ARCHS.items():
        if shape == tuple(sample_shape):
            return arch
    raise UsageError(f"no autoencoder architecture for sample shape {sample_shape}")


@dataclass
class AutoencoderPair:
    """Pretrained sample encoder/decoder; the decoder is the transferable part."""

    encoder: nn.Module
    decoder: nn.Module
    latent_width: int
    arch: str
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return AE_ARCHS[self.arch][3]

    def reconstruct(self, samples: np.ndarray) -> np.ndarray:
        self.encoder.eval()
        self.decoder.eval()
        with torch.no_grad():
            out = self.decoder(self.encoder(torch.from_numpy(
                np.ascontiguousarray(samples, dtype=np.float32))))
        return np.clip(out.numpy(), 0.0, 1.0)


@dataclass
class SsrModel:
    """Delta encoder -> bridge -> transplanted decoder, fine-tuned under MSE."""

    delta_encoder: DeltaEncoder
    bridge: nn.Linear
    decoder: nn.Module
    ae_arch: str
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def input_width(self) -> int:
        return self.delta_encoder.input_width

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return AE_ARCHS[self.ae_arch][3]


def train_autoencoder(shadow_train: LabeledDataset, arch: str | None = None,
                      epochs: int = 50, lr: float = 1e-3, batch_size: int = 64,
                      val_fraction: float = 0.1, dropout: float = 0.2,
                      seed: int = 0, patience: int = 5) -> AutoencoderPair:
    """Train a reconstruction autoencoder on shadow data.

    Held-out shadow MSE is tracked for early stopping and recorded in the
    returned pair's meta under ``holdout_mse``.
    """
    arch = arch or infer_ae_arch(shadow_train.sample_shape)
    if arch not in AE_ARCHS:
        raise UsageError(f"unknown autoencoder arch {arch!r}")
    enc_cls, dec_cls, latent, shape = AE_ARCHS[arch]
    if tuple(shadow_train.sample_shape) != shape:
        raise UsageError(
            f"shadow data shape {shadow_train.sample_shape} does not match {arch} input {shape}")

    seed_torch(derive_seed(seed, 0xAE01))
    encoder = enc_cls(dropout=dropout)
    decoder = dec_cls(dropout=dropout)

    order_rng = rng(seed, 0xAE02)
    order = order_rng.permutation(len(shadow_train))
    n_val = max(1, int(round(len(order) * val_fraction)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    xs = torch.from_numpy(shadow_train.samples)

    params = list(encoder.parameters()) + list(decoder.parameters())
    optimizer = torch.optim.Adam(params, lr=lr)
    best_val, best_state, stale = float("inf"), None, 0
    history = []
    for _ in range(epochs):
        encoder.train()
        decoder.train()
        epoch_order = order_rng.permutation(len(train_idx))
        for start in range(0, len(train_idx), batch_size):
            idx = train_idx[epoch_order[start:start + batch_size]]
            optimizer.zero_grad()
            loss = F.mse_loss(decoder(encoder(xs[idx])), xs[idx])
            loss.backward()
            optimizer.step()
        encoder.eval()
        decoder.eval()
        with torch.no_grad():
            val_mse = float(F.mse_loss(decoder(encoder(xs[val_idx])), xs[val_idx]))
        history.append(val_mse)
        if val_mse < best_val - 1e-7:
            best_val, stale = val_mse, 0
            best_state = (copy.deepcopy(encoder.state_dict()),
                          copy.deepcopy(decoder.state_dict()))
        else:
            stale += 1
            if stale >= patience:
                break
    if best_state is not None:
        encoder.load_state_dict(best_state[0])
        decoder.load_state_dict(best_state[1])
    encoder.eval()
    decoder.eval()
    meta = {"arch": arch, "epochs": epochs, "lr": lr, "dropout": dropout,
            "seed": seed, "holdout_mse": best_val, "val_history": history}
    return AutoencoderPair(encoder=encoder, decoder=decoder, latent_width=latent,
                           arch=arch, meta=meta)


def assemble_and_train_ssr(ae: AutoencoderPair, corpus: AttackCorpus,
                           epochs: int = 50, lr: float = 1e-3,
                           dropout: float = 0.5, val_fraction: float = 0.1,
                           batch_size: int = 64, seed: int = 0,
                           patience: int = 5) -> SsrModel:
    """Transplant the AE decoder behind a delta encoder and fine-tune jointly.

    With ``epochs=0`` the model is returned exactly as assembled: the decoder
    weights are bit-identical to the pretrained autoencoder's.
    """
    if corpus.target_kind != "samples":
        raise UsageError("corpus targets must be projected to samples first")
    if np.any(corpus.cardinalities != 1):
        raise UsageError("single-sample reconstruction requires cardinality-1 corpora")
    if tuple(corpus.sample_shape) != ae.sample_shape:
        raise UsageError("corpus sample shape does not match the autoencoder")

    seed_torch(derive_seed(seed, 0x55F0))
    delta_encoder = DeltaEncoder(corpus.delta_width, dropout=dropout)
    bridge = nn.Linear(LATENT_WIDTH, ae.latent_width)
    decoder = copy.deepcopy(ae.decoder)

    targets = torch.from_numpy(np.stack([s[0] for s in corpus.targets]).astype(np.float32))
    xs = torch.from_numpy(corpus.deltas)

    order_rng = rng(seed, 0x55F1)
    order = order_rng.permutation(len(corpus))
    n_val = int(round(len(order) * val_fraction)) if len(order) >= 10 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]

    params = (list(delta_encoder.parameters()) + list(bridge.parameters())
              + list(decoder.parameters()))
    optimizer = torch.optim.Adam(params, lr=lr)
    modules = (delta_encoder, bridge, decoder)
    best_val, best_state, stale = float("inf"), None, 0
    history = []
    for _ in range(epochs):
        for m in modules:
            m.train()
        epoch_order = order_rng.permutation(len(train_idx))
        for start in range(0, len(train_idx), batch_size):
            idx = train_idx[epoch_order[start:start + batch_size]]
            optimizer.zero_grad()
            pred = decoder(bridge(delta_encoder(xs[idx])))
            loss = F.mse_loss(pred, targets[idx])
            loss.backward()
            optimizer.step()
        if n_val:
            for m in modules:
                m.eval()
            with torch.no_grad():
                val_mse = float(F.mse_loss(decoder(bridge(delta_encoder(xs[val_idx]))),
                                           targets[val_idx]))
            history.append(val_mse)
            if val_mse < best_val - 1e-7:
                best_val, stale = val_mse, 0
                best_state = tuple(copy.deepcopy(m.state_dict()) for m in modules)
            else:
                stale += 1
                if stale >= patience:
                    break
    if best_state is not None:
        for m, state in zip(modules, best_state):
            m.load_state_dict(state)
    for m in modules:
        m.eval()
    meta = {"epochs": epochs, "lr": lr, "dropout": dropout, "seed": seed,
            "val_history": history, "ae_meta": dict(ae.meta),
            "probe_fingerprint": corpus.probe_fingerprint}
    return SsrModel(delta_encoder=delta_encoder, bridge=bridge, decoder=decoder,
                    ae_arch=ae.arch, meta=meta)


def reconstruct_single(model: SsrModel, delta: DeltaVector | np.ndarray) -> np.ndarray:
    """Map one posterior difference to a reconstructed sample in [0, 1]."""
    values = delta.values if isinstance(delta, DeltaVector) else np.asarray(delta, np.float32)
    return reconstruct_batch(model, values[None, :])[0]


def reconstruct_batch(model: SsrModel, deltas: np.ndarray) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float32)
    if deltas.shape[1] != model.input_width:
        raise UsageError(
            f"delta width {deltas.shape[1]} does not match model input {model.input_width}")
    for m in (model.delta_encoder, model.bridge, model.decoder):
        m.eval()
    with torch.no_grad():
        out = model.decoder(model.bridge(model.delta_encoder(torch.from_numpy(deltas))))
    return np.clip(out.numpy(), 0.0, 1.0)


# ---------------------------------------------------------------------------
# checkpoints

def save_ssr_model(model: SsrModel, path: str | Path) -> None:
    arrays = {}
    for prefix, module in (("delta_encoder", model.delta_encoder),
                           ("bridge", model.bridge), ("decoder", model.decoder)):
        arrays.update({f"{prefix}.{k}": v.numpy() for k, v in module.state_dict().items()})
    meta = {"ae_arch": model.ae_arch, "input_width": model.input_width,
            "meta": model.meta}
    save_container(path, "ssr-model", meta, arrays)


def load_ssr_model(path: str | Path) -> SsrModel:
    kind, meta, arrays = load_container(path)
    if kind != "ssr-model":
        raise UsageError(f"expected an ssr-model checkpoint, found {kind!r}: {path}")
    _, dec_cls, latent, _ = AE_ARCHS[meta["ae_arch"]]
    dropout = meta["meta"].get("dropout", 0.5)
    model = SsrModel(
        delta_encoder=DeltaEncoder(meta["input_width"], dropout=dropout),
        bridge=nn.Linear(LATENT_WIDTH, latent),
        decoder=dec_cls(),
        ae_arch=meta["ae_arch"],
        meta=meta["meta"],
    )
    for prefix, module in (("delta_encoder", model.delta_encoder),
                           ("bridge", model.bridge), ("decoder", model.decoder)):
        module.load_state_dict({k[len(prefix) + 1:]: torch.from_numpy(v)
                                for k, v in arrays.items() if k.startswith(prefix + ".")})
        module.eval()
    return model
