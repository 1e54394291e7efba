"""Deformation field producing per-Gaussian residuals at a normalized time."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError, InvalidParameterError
from .nets import Mlp, MlpSpec, positional_encoding, positional_encoding_backward


@dataclass
class DeformationOutput:
    dx: np.ndarray
    dr: np.ndarray
    ds: np.ndarray
    dc: np.ndarray
    dalpha: np.ndarray


@dataclass
class DeformedParams:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    rotation_norm: np.ndarray


def normalized_time(index, K):
    return float(index) / float(K - 1)


class DeformField:
    """``f_def(PE(x), z_s, z_t, PE(t))``: a ReLU MLP whose zero-initialised output
    layer is split into position, rotation, log-scale (and optionally colour and
    opacity) residuals.

    Pass ``zs_dim = zt_dim = 0`` for the position-only baseline field.
    """

    def __init__(self, rng, zs_dim=32, zt_dim=32, hidden=64, n_layers=6, pos_freqs=6, time_freqs=4,
                 deform_color=False, deform_opacity=False, gate_by_pdyn=True):
        self.pos_freqs = pos_freqs
        self.time_freqs = time_freqs
        self.zs_dim = zs_dim
        self.zt_dim = zt_dim
        self.deform_color = deform_color
        self.deform_opacity = deform_opacity
        self.gate_by_pdyn = gate_by_pdyn
        self.out_dim = 10 + (3 if deform_color else 0) + (1 if deform_opacity else 0)
        in_dim = 6 * pos_freqs + zs_dim + zt_dim + 2 * time_freqs
        widths = (in_dim,) + (hidden,) * (n_layers - 1) + (self.out_dim,)
        acts = ("relu",) * (n_layers - 1) + ("linear",)
        self.net = Mlp(MlpSpec(widths, acts), rng, "deform.", zero_last=True)

    def _split(self, out):
        n = out.shape[0]
        dc = out[:, 10:13] if self.deform_color else np.zeros((n, 3))
        off = 13 if self.deform_color else 10
        da = out[:, off] if self.deform_opacity else np.zeros(n)
        return DeformationOutput(dx=out[:, 0:3], dr=out[:, 3:7], ds=out[:, 7:10], dc=dc, dalpha=da)

    def forward(self, x, t, z_s=None, z_t=None, p_dyn=None, train=False, rng=None):
        if not 0.0 <= t <= 1.0:
            raise InvalidInputError(f"normalized time {t} outside [0, 1]")
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        n = x.shape[0]
        parts = [positional_encoding(x, self.pos_freqs)]
        if self.zs_dim:
            parts.append(z_s)
        if self.zt_dim:
            parts.append(z_t)
        parts.append(np.broadcast_to(positional_encoding(np.array([t]), self.time_freqs), (n, 2 * self.time_freqs)))
        inp = np.concatenate(parts, axis=1)
        raw, ctx = self.net.forward(inp, train, rng)
        gate = None
        if self.gate_by_pdyn and p_dyn is not None:
            gate = np.asarray(p_dyn, dtype=np.float64).reshape(n, 1)
            out = raw * gate
        else:
            out = raw
        return self._split(out), (x, t, raw, gate, ctx)

    def backward(self, ctx, g_out: DeformationOutput):
        """Returns ``(param_grads, grad_x, grad_zs, grad_zt, grad_pdyn, grad_t)``."""
        x, t, raw, gate, net_ctx = ctx
        n = x.shape[0]
        g = np.zeros((n, self.out_dim))
        g[:, 0:3] = g_out.dx
        g[:, 3:7] = g_out.dr
        g[:, 7:10] = g_out.ds
        if self.deform_color:
            g[:, 10:13] = g_out.dc
        if self.deform_opacity:
            g[:, 13 if self.deform_color else 10] = g_out.dalpha
        g_pdyn = None
        if gate is not None:
            g_pdyn = np.sum(g * raw, axis=1)
            g = g * gate
        grads, g_in = self.net.backward(net_ctx, g)
        n_pe = 6 * self.pos_freqs
        g_x = positional_encoding_backward(x, self.pos_freqs, g_in[:, :n_pe])
        g_zs = g_in[:, n_pe:n_pe + self.zs_dim]
        g_zt = g_in[:, n_pe + self.zs_dim:n_pe + self.zs_dim + self.zt_dim]
        g_tpe = g_in[:, n_pe + self.zs_dim + self.zt_dim:].sum(axis=0)
        g_t = float(positional_encoding_backward(np.array([t]), self.time_freqs, g_tpe)[0])
        return grads, g_x, g_zs, g_zt, g_pdyn, g_t


def deform_forward(x, feats, t, field: DeformField, train=False, rng=None):
    if feats is None:
        return field.forward(x, t, train=train, rng=rng)
    return field.forward(x, t, feats.z_s, feats.z_t, feats.p_dyn, train, rng)


def apply_deformation(cloud, deltas: DeformationOutput) -> DeformedParams:
    """Canonical parameters plus residuals; the canonical cloud is left untouched.

    The rotation residual is added to the raw quaternion and the sum renormalized.
    """
    n = cloud.n
    if deltas.dx.shape[0] != n:
        raise InvalidInputError(f"got residuals for {deltas.dx.shape[0]} Gaussians, cloud has {n}")
    rot = cloud.rotation + deltas.dr
    norm = np.linalg.norm(rot, axis=1, keepdims=True)
    if np.any(norm <= 1e-12):
        raise InvalidParameterError("deformed quaternion has (near) zero norm")
    return DeformedParams(
        position=cloud.position + deltas.dx,
        rotation=rot / norm,
        log_scale=cloud.log_scale + deltas.ds,
        color=cloud.color + deltas.dc,
        opacity=cloud.opacity + deltas.dalpha,
        rotation_norm=norm,
    )
