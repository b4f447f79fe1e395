"""Training objectives. Probabilities, durations and displacements are
``(B, N)`` tensors; labels follow the 3 x N track layout split into
``onset``, ``duration`` and ``displacement`` tensors."""

from __future__ import annotations

import warnings

import numpy as np
import torch

from ..primitive import peak_pick, profile_partials
from ..signal import CANONICAL_RATE

EPS = 1e-7
DURATION_FLOOR = 1e-3


class MinJerkReconstruct(torch.autograd.Function):
    """Sum of minimum-jerk primitives at fixed integer onsets.

    Differentiable in durations and displacements; gradients are the closed
    form partials from :func:`submovekit.primitive.profile_partials`.
    """

    @staticmethod
    def forward(ctx, durations, displacements, onsets, batch_idx, batch_size, length, rate):
        T = durations.detach().cpu().double().numpy()
        d = displacements.detach().cpu().double().numpy()
        v, unit, dT = profile_partials(onsets, T, d, length, rate)
        out = np.zeros((batch_size, length))
        np.add.at(out, batch_idx, v)
        ctx.unit, ctx.dT, ctx.batch_idx = unit, dT, batch_idx
        return torch.from_numpy(out).to(durations.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        g = grad_out.detach().cpu().double().numpy()[ctx.batch_idx]
        grad_T = torch.from_numpy((g * ctx.dT).sum(axis=1)).to(grad_out.dtype)
        grad_d = torch.from_numpy((g * ctx.unit).sum(axis=1)).to(grad_out.dtype)
        return grad_T, grad_d, None, None, None, None, None


def decode_onsets(prob: torch.Tensor, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Peak-picked onsets for every row; returns ``(batch_idx, onset_idx)``."""
    p = prob.detach().cpu().double().numpy()
    rows, cols = [], []
    for b in range(p.shape[0]):
        idx = peak_pick(p[b], threshold)
        rows.append(np.full(len(idx), b, dtype=np.int64))
        cols.append(idx)
    return np.concatenate(rows), np.concatenate(cols)


def reconstruct(prob, duration, displacement, rate: float = CANONICAL_RATE, threshold: float = 0.5):
    """Decode onsets from ``prob`` and compose primitives from the heads.

    Returns ``(reconstruction, n_detected)``.
    """
    B, N = prob.shape
    rows, cols = decode_onsets(prob, threshold)
    if len(cols) == 0:
        return duration.new_zeros((B, N)), 0
    rows_t, cols_t = torch.from_numpy(rows), torch.from_numpy(cols)
    T = duration[rows_t, cols_t].clamp_min(DURATION_FLOOR)
    d = displacement[rows_t, cols_t]
    return MinJerkReconstruct.apply(T, d, cols.astype(float), rows, B, N, rate), len(cols)


def loss_bce_pretrain(prob, onset, alpha: float = 0.9):
    p = prob.clamp(EPS, 1 - EPS)
    y = onset.to(p.dtype)
    return -(alpha * y * torch.log(p) + (1 - alpha) * (1 - y) * torch.log(1 - p)).mean()


def onset_distance(onset: torch.Tensor) -> torch.Tensor:
    """Distance (samples) from every position to the nearest onset in its row.

    Rows without onsets get ``inf``.
    """
    y = onset.detach().cpu().numpy().astype(bool)
    B, N = y.shape
    out = np.full((B, N), np.inf)
    t = np.arange(N)
    for b in range(B):
        idx = np.flatnonzero(y[b])
        if len(idx):
            pos = np.clip(np.searchsorted(idx, t), 1, len(idx)) - 1
            nxt = np.clip(pos + 1, 0, len(idx) - 1)
            out[b] = np.minimum(np.abs(t - idx[pos]), np.abs(t - idx[nxt]))
    return torch.from_numpy(out)


def negative_weights(onset: torch.Tensor) -> torch.Tensor:
    """0.25 / 0.5 / 1 for distance 1 / 2 / >=3 from the nearest true onset."""
    dist = onset_distance(onset)
    beta = torch.ones_like(dist)
    beta[dist == 1] = 0.25
    beta[dist == 2] = 0.5
    return beta


def loss_bce_finetune(prob, onset, displacement_true, n_detected: int, alpha: float = 0.9):
    """Adaptive BCE: positives weighted by sqrt|d|, negatives by distance
    decay and by the detected/true onset-count ratio ``gamma`` (>= 1)."""
    p = prob.clamp(EPS, 1 - EPS)
    y = onset.to(p.dtype)
    n_true = int(y.sum().item())
    gamma = max(1.0, n_detected / n_true) if n_true > 0 else 1.0
    beta = negative_weights(onset).to(p.dtype)
    pos = alpha * torch.sqrt(displacement_true.abs().to(p.dtype)) * y * torch.log(p)
    neg = (1 - alpha) * beta * gamma * (1 - y) * torch.log(1 - p)
    return -(pos + neg).mean()


def loss_mse_params(duration, displacement, onset, duration_true, displacement_true):
    """MSE of both regression heads read at true onsets only.

    With no onsets in the batch both losses are 0 and a warning is issued.
    """
    mask = onset.bool()
    if not mask.any():
        warnings.warn("no ground-truth onsets in batch; parameter losses set to 0", RuntimeWarning, stacklevel=2)
        zero = duration.sum() * 0
        return zero, zero
    dur = ((duration[mask] - duration_true[mask].to(duration.dtype)) ** 2).mean()
    disp = ((displacement[mask] - displacement_true[mask].to(displacement.dtype)) ** 2).mean()
    return dur, disp


def loss_reconstruction(prob, duration, displacement, clean, rate: float = CANONICAL_RATE, threshold: float = 0.5):
    """Mean squared error between the decoded reconstruction and ``clean``.

    Returns ``(loss, n_detected)``.
    """
    recon, n = reconstruct(prob, duration, displacement, rate, threshold)
    return ((recon - clean.to(recon.dtype)) ** 2).mean(), n


def total_loss(components, epoch_means, weights):
    """``sum_i w_i * (L_i / E[L_i]) * E[L_bce]``; component 0 is the BCE term.

    Components with a zero weight or a non-positive epoch mean contribute 0.
    """
    scale = float(epoch_means[0])
    total = 0.0
    for L, mean, w in zip(components, epoch_means, weights):
        if w == 0 or not mean > 0:
            continue
        total = total + w * (L / float(mean)) * scale
    return total


class EpochMeans:
    """Running arithmetic means of loss components within one epoch."""

    def __init__(self, n: int = 4):
        self.n = n
        self.reset()

    def reset(self):
        self.sums = np.zeros(self.n)
        self.counts = np.zeros(self.n)

    def update(self, values, active=None):
        for i, v in enumerate(values):
            if active is None or active[i]:
                self.sums[i] += float(v)
                self.counts[i] += 1

    @property
    def means(self) -> np.ndarray:
        return np.divide(self.sums, self.counts, out=np.zeros(self.n), where=self.counts > 0)
