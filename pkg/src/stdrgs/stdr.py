"""Spatio-temporal decoupling: the separated feature network, the two mask
consistency regularizers, and the three-phase training schedule."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .cloud import softmax_rows, softmax_rows_backward
from .exceptions import ContractError, InvalidInputError
from .nets import Mlp, MlpSpec, positional_encoding, positional_encoding_backward, sigmoid

KL_CLAMP = 1e-8


class Phase(enum.IntEnum):
    WARM_UP = 0
    REGULARIZED = 1
    FROZEN = 2


@dataclass(frozen=True)
class SchedulePhase:
    tag: Phase
    warm_up_end: int = 3000
    reg_end: int = 6000

    @property
    def regularizers_active(self) -> bool:
        return self.tag != Phase.FROZEN

    @property
    def opacity_trainable(self) -> bool:
        return self.tag != Phase.WARM_UP

    @property
    def masks_trainable(self) -> bool:
        return self.tag != Phase.FROZEN

    @property
    def deformation_active(self) -> bool:
        return self.tag != Phase.WARM_UP


def schedule_phase(iteration, warm_up_end=3000, reg_end=6000) -> SchedulePhase:
    if iteration < warm_up_end:
        tag = Phase.WARM_UP
    elif iteration < reg_end:
        tag = Phase.REGULARIZED
    else:
        tag = Phase.FROZEN
    return SchedulePhase(tag, warm_up_end, reg_end)


@dataclass
class SepFeatures:
    z_s: np.ndarray
    z_t: np.ndarray
    p_dyn: np.ndarray


class SepField:
    """Two shared ReLU layers over ``[PE(x), m~]`` feeding a tanh temporal branch and a
    sigmoid dynamic/static branch. The shared output is the spatial feature ``z_s``."""

    def __init__(self, K, rng, hidden=64, zs_dim=32, zt_dim=32, pos_freqs=6,
                 batch_norm=True, dropout=0.1):
        self.K = int(K)
        self.pos_freqs = pos_freqs
        in_dim = 3 * 2 * pos_freqs + self.K
        self.shared = Mlp(MlpSpec((in_dim, hidden, zs_dim), ("relu", "relu")), rng, "sep.shared.")
        branch_bn = (batch_norm, False)
        branch_dp = (dropout, 0.0)
        self.temporal = Mlp(MlpSpec((zs_dim, hidden, zt_dim), ("relu", "tanh"), branch_bn, branch_dp),
                            rng, "sep.temporal.")
        self.dynamic = Mlp(MlpSpec((zs_dim, hidden, 1), ("relu", "sigmoid"), branch_bn, branch_dp),
                           rng, "sep.dynamic.")

    @property
    def nets(self):
        return (self.shared, self.temporal, self.dynamic)

    @property
    def zs_dim(self):
        return self.shared.spec.widths[-1]

    @property
    def zt_dim(self):
        return self.temporal.spec.widths[-1]

    def forward(self, x, probs, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        probs = np.asarray(probs, dtype=np.float64).reshape(x.shape[0], -1)
        if probs.shape[1] != self.K or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9) or np.any(probs < 0):
            raise ContractError("mask rows must be probability vectors over K timestamps")
        inp = np.concatenate([positional_encoding(x, self.pos_freqs), probs], axis=1)
        z_s, c_shared = self.shared.forward(inp, train, rng)
        z_t, c_t = self.temporal.forward(z_s, train, rng)
        p, c_p = self.dynamic.forward(z_s, train, rng)
        ctx = (x, c_shared, c_t, c_p)
        return SepFeatures(z_s=z_s, z_t=z_t, p_dyn=p[:, 0]), ctx

    def backward(self, ctx, g_zs, g_zt, g_pdyn):
        """Returns ``(param_grads, grad_x, grad_probs)``."""
        x, c_shared, c_t, c_p = ctx
        grads, g_in_t = self.temporal.backward(c_t, g_zt)
        gp, g_in_p = self.dynamic.backward(c_p, np.asarray(g_pdyn).reshape(-1, 1))
        grads.update(gp)
        gs, g_in = self.shared.backward(c_shared, g_zs + g_in_t + g_in_p)
        grads.update(gs)
        n_pe = 3 * 2 * self.pos_freqs
        g_x = positional_encoding_backward(x, self.pos_freqs, g_in[:, :n_pe])
        return grads, g_x, g_in[:, n_pe:]


def sep_field_forward(x, probs, field: SepField, train=False, rng=None):
    return field.forward(x, probs, train, rng)


def temporal_smoothness_loss(mask_logits, normalize=True):
    """Squared differences of sigmoid-activated masks at adjacent timestamps.

    With ``normalize`` the sum is divided by the number of adjacent pairs
    ``N * (K - 1)``; otherwise the raw sum is returned. Returns ``(loss, grad)``.
    """
    m = np.asarray(mask_logits, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] < 2:
        raise InvalidInputError("temporal smoothness needs K >= 2 timestamps")
    s = sigmoid(m)
    d = s[:, :-1] - s[:, 1:]
    scale = 1.0 / d.size if normalize and d.size else 1.0
    loss = scale * float(np.sum(d * d))
    gs = np.zeros_like(s)
    gs[:, :-1] += 2.0 * d
    gs[:, 1:] -= 2.0 * d
    return loss, scale * gs * s * (1.0 - s)


def sample_kl_anchors(n, k, sample_size, cap, rng):
    """Anchor indices for the neighbour KL term: ``min(M, N)`` without replacement,
    further limited so that anchors * k does not exceed ``cap``."""
    m = min(int(sample_size), n, max(int(cap) // max(k, 1), 1))
    return np.sort(rng.choice(n, size=m, replace=False))


def spatial_awareness_loss(mask_logits, knn, sample_size=1000, cap=20000, rng=None, anchors=None):
    """Mean KL(p_i || p_j) over sampled anchors i and their KNN neighbours j,
    on softmax-normalized mask rows clamped to >= 1e-8. Returns ``(loss, grad)``."""
    m = np.asarray(mask_logits, dtype=np.float64)
    knn = np.asarray(knn)
    if knn.size == 0:
        raise InvalidInputError("spatial-awareness loss needs a non-empty neighbour table")
    if int(sample_size) < 1:
        raise InvalidInputError("sample size must be >= 1")
    n, k = knn.shape
    if anchors is None:
        if rng is None:
            raise InvalidInputError("an rng is required to sample anchors")
        anchors = sample_kl_anchors(n, k, sample_size, cap, rng)
    p = softmax_rows(m)
    pc = np.maximum(p, KL_CLAMP)
    active = (p >= KL_CLAMP).astype(np.float64)
    ii = np.repeat(anchors, k)
    jj = knn[anchors].reshape(-1)
    pi, pj = pc[ii], pc[jj]
    logratio = np.log(pi) - np.log(pj)
    n_terms = ii.size
    loss = float(np.sum(pi * logratio)) / n_terms
    g_pc = np.zeros_like(p)
    np.add.at(g_pc, ii, (logratio + 1.0) / n_terms)
    np.add.at(g_pc, jj, -pi / pj / n_terms)
    return loss, softmax_rows_backward(p, g_pc * active)
