"""Temporal fully-convolutional detector and its binary weights format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..signal import VelocitySeries

WEIGHTS_MAGIC = b"SSMO"
WEIGHTS_VERSION = 1


class InvalidWeightsError(ValueError):
    pass


class WeightsVersionError(InvalidWeightsError):
    def __init__(self, expected: int, found: int):
        super().__init__(f"weights format version mismatch: expected {expected}, found {found}")
        self.expected = expected
        self.found = found


@dataclass
class TfcnConfig:
    hidden_channels: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 128, 128, 256, 256])
    hidden_kernel: int = 13
    output_kernel: int = 3
    dropout: float = 0.2
    in_channels: int = 1

    def __post_init__(self):
        self.hidden_channels = [int(c) for c in self.hidden_channels]
        for k in (self.hidden_kernel, self.output_kernel):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and positive, got {k}")
        if not self.hidden_channels:
            raise ValueError("need at least one hidden layer")

    @property
    def receptive_field(self) -> int:
        return 1 + len(self.hidden_channels) * (self.hidden_kernel - 1) + (self.output_kernel - 1)


@dataclass(frozen=True)
class DetectorOutput:
    onset_prob: np.ndarray
    duration: np.ndarray
    displacement: np.ndarray

    def __len__(self):
        return len(self.onset_prob)


class Tfcn(nn.Module):
    """Hidden layers conv -> batch-norm -> ReLU -> dropout, then a 3-channel
    output conv. Heads: sigmoid onset probability, softplus duration (s),
    identity displacement. Zero padding keeps the sequence length."""

    def __init__(self, config: TfcnConfig | None = None):
        super().__init__()
        self.config = config or TfcnConfig()
        c = self.config
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        prev = c.in_channels
        for ch in c.hidden_channels:
            self.convs.append(nn.Conv1d(prev, ch, c.hidden_kernel, padding=c.hidden_kernel // 2))
            self.norms.append(nn.BatchNorm1d(ch))
            prev = ch
        self.head = nn.Conv1d(prev, 3, c.output_kernel, padding=c.output_kernel // 2)
        self.dropout = nn.Dropout(c.dropout)

    def set_dropout(self, p: float):
        self.dropout.p = p

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        for conv, bn in zip(self.convs, self.norms):
            x = self.dropout(F.relu(bn(conv(x))))
        return self.head(x)

    def forward(self, x: torch.Tensor):
        """``x``: (B, N) or (B, 1, N). Returns ``(prob, duration, displacement)``, each (B, N)."""
        if x.dim() == 2:
            x = x.unsqueeze(1)
        h = self.raw(x)
        return torch.sigmoid(h[:, 0]), F.softplus(h[:, 1]), h[:, 2]

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # Fixed blob order used by the weights file.
    def ordered_tensors(self) -> list[tuple[str, torch.Tensor]]:
        out = []
        for i, (conv, bn) in enumerate(zip(self.convs, self.norms)):
            out += [
                (f"hidden{i}.conv.weight", conv.weight),
                (f"hidden{i}.conv.bias", conv.bias),
                (f"hidden{i}.bn.weight", bn.weight),
                (f"hidden{i}.bn.bias", bn.bias),
                (f"hidden{i}.bn.running_mean", bn.running_mean),
                (f"hidden{i}.bn.running_var", bn.running_var),
            ]
        out += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return out


@dataclass
class TfcnWeights:
    """Detached parameter set plus the config it belongs to."""

    config: TfcnConfig
    tensors: dict[str, np.ndarray]
    version: int = WEIGHTS_VERSION

    @classmethod
    def from_model(cls, model: Tfcn) -> "TfcnWeights":
        return cls(model.config, {k: t.detach().cpu().numpy().copy() for k, t in model.ordered_tensors()})

    def to_model(self) -> Tfcn:
        model = Tfcn(self.config)
        expected = dict(model.ordered_tensors())
        if set(expected) != set(self.tensors):
            raise InvalidWeightsError("tensor names do not match the configured architecture")
        with torch.no_grad():
            for name, t in expected.items():
                arr = np.asarray(self.tensors[name])
                if tuple(arr.shape) != tuple(t.shape):
                    raise InvalidWeightsError(f"{name}: expected shape {tuple(t.shape)}, got {arr.shape}")
                t.copy_(torch.from_numpy(arr.astype(np.float32)))
        model.eval()
        return model


def save_weights(model_or_weights, path) -> Path:
    """Little-endian float32 blobs after a ``SSMO`` header.

    Header: magic, u32 version, u32 in_channels, u32 n_hidden, n_hidden x u32
    channels, u32 hidden kernel, u32 output kernel, f32 dropout.
    """
    w = model_or_weights if isinstance(model_or_weights, TfcnWeights) else TfcnWeights.from_model(model_or_weights)
    c = w.config
    n = len(c.hidden_channels)
    header = WEIGHTS_MAGIC + struct.pack(
        f"<III{n}IIIf", w.version, c.in_channels, n, *c.hidden_channels, c.hidden_kernel, c.output_kernel, c.dropout
    )
    names = [name for name, _ in Tfcn(c).ordered_tensors()]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(w.tensors[name], dtype="<f4").tobytes())
    return path


def load_weights(path) -> TfcnWeights:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC or len(data) < 8:
        raise InvalidWeightsError(f"{path}: not a weights file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != WEIGHTS_VERSION:
        raise WeightsVersionError(WEIGHTS_VERSION, version)
    try:
        in_ch, n = struct.unpack_from("<II", data, 8)
        off = 16
        channels = list(struct.unpack_from(f"<{n}I", data, off))
        off += 4 * n
        hk, ok, dropout = struct.unpack_from("<IIf", data, off)
        off += 12
        config = TfcnConfig(channels, hk, ok, round(float(dropout), 6), in_ch)
    except (struct.error, ValueError) as exc:
        raise InvalidWeightsError(f"{path}: malformed header ({exc})") from exc
    tensors = {}
    for name, t in Tfcn(config).ordered_tensors():
        count = t.numel()
        if off + 4 * count > len(data):
            raise InvalidWeightsError(f"{path}: truncated at {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(tuple(t.shape)).copy()
        off += 4 * count
    if off != len(data):
        raise InvalidWeightsError(f"{path}: {len(data) - off} trailing bytes")
    return TfcnWeights(config, tensors, version)


def as_model(weights) -> Tfcn:
    if isinstance(weights, Tfcn):
        return weights
    if isinstance(weights, TfcnWeights):
        return weights.to_model()
    return load_weights(weights).to_model()


def forward(weights, series: VelocitySeries, training_mode: bool = False) -> DetectorOutput:
    """Run the detector on one signal."""
    model = as_model(weights)
    if len(series) < 1:
        raise ValueError("input must have at least one sample")
    was_training = model.training
    model.train(training_mode)
    dtype = next(model.parameters()).dtype
    x = torch.tensor(series.values, dtype=dtype).view(1, 1, -1)
    try:
        with torch.set_grad_enabled(training_mode):
            p, T, d = model(x)
    finally:
        model.train(was_training)
    return DetectorOutput(
        p[0].detach().double().numpy(), T[0].detach().double().numpy(), d[0].detach().double().numpy()
    )
