"""Small fully connected networks with hand-derived gradients, plus Adam.

Layer order inside each block is affine -> batch-norm -> activation -> dropout.
Parameters live in a flat ``{name: array}`` dict so the optimizer and the
checkpoint writer can treat every network the same way.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, InvalidInputError

ACTIVATIONS = ("relu", "tanh", "sigmoid", "linear")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def positional_encoding(v, n_freqs):
    """Frequency encoding of the last axis.

    Output layout per input dimension ``d``: ``sin(2^0 pi v_d), cos(2^0 pi v_d), ...,
    sin(2^{L-1} pi v_d), cos(2^{L-1} pi v_d)``; dimensions are concatenated in order.
    """
    v = np.asarray(v, dtype=np.float64)
    if n_freqs < 0:
        raise InvalidInputError("frequency count must be >= 0")
    freqs = np.pi * 2.0 ** np.arange(n_freqs)
    ang = v[..., :, None] * freqs
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return enc.reshape(*v.shape[:-1], v.shape[-1] * 2 * n_freqs)


def positional_encoding_backward(v, n_freqs, grad):
    v = np.asarray(v, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(n_freqs)
    ang = v[..., :, None] * freqs
    g = grad.reshape(*v.shape, n_freqs, 2)
    return np.sum(freqs * (g[..., 0] * np.cos(ang) - g[..., 1] * np.sin(ang)), axis=-1)


@dataclass(frozen=True)
class MlpSpec:
    """Widths include the input: ``widths=[in, h1, ..., out]``."""

    widths: tuple
    activations: tuple
    batch_norm: tuple = ()
    dropout: tuple = ()

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        n = len(widths) - 1
        if n < 1 or any(w <= 0 for w in widths):
            raise InvalidInputError("an MLP needs at least one layer of positive width")
        acts = tuple(self.activations)
        if len(acts) != n or any(a not in ACTIVATIONS for a in acts):
            raise InvalidInputError(f"need {n} activations from {ACTIVATIONS}")
        bn = tuple(bool(b) for b in self.batch_norm) or (False,) * n
        dp = tuple(float(d) for d in self.dropout) or (0.0,) * n
        if len(bn) != n or len(dp) != n or any(not 0.0 <= d < 1.0 for d in dp):
            raise InvalidInputError("batch-norm/dropout flags must be one per layer, rate in [0, 1)")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "batch_norm", bn)
        object.__setattr__(self, "dropout", dp)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def init_mlp(spec: MlpSpec, rng, prefix="", zero_last=False):
    """Uniform(+-1/sqrt(fan_in)) weights and biases; optionally a zeroed output layer."""
    params, buffers = {}, {}
    for li in range(spec.n_layers):
        fan_in, fan_out = spec.widths[li], spec.widths[li + 1]
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        if zero_last and li == spec.n_layers - 1:
            W[:] = 0.0
            b[:] = 0.0
        params[f"{prefix}{li}.W"] = W
        params[f"{prefix}{li}.b"] = b
        if spec.batch_norm[li]:
            params[f"{prefix}{li}.gamma"] = np.ones(fan_out)
            params[f"{prefix}{li}.beta"] = np.zeros(fan_out)
            buffers[f"{prefix}{li}.mean"] = np.zeros(fan_out)
            buffers[f"{prefix}{li}.var"] = np.ones(fan_out)
    return params, buffers


@dataclass
class MlpContext:
    spec: MlpSpec
    prefix: str
    train: bool
    inputs: list = field(default_factory=list)
    xhat: list = field(default_factory=list)
    inv_std: list = field(default_factory=list)
    post: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    batch: int = 0
    out_width: int = 0


def _activate(name, h):
    if name == "relu":
        return np.maximum(h, 0.0)
    if name == "tanh":
        return np.tanh(h)
    if name == "sigmoid":
        return sigmoid(h)
    return h


def _activate_backward(name, out, g):
    if name == "relu":
        return g * (out > 0.0)
    if name == "tanh":
        return g * (1.0 - out * out)
    if name == "sigmoid":
        return g * out * (1.0 - out)
    return g


def mlp_forward(spec: MlpSpec, params, x, train=False, rng=None, buffers=None, prefix=""):
    """Run the network on a batch ``x`` of shape (B, in). Returns ``(out, ctx)``.

    In train mode batch-norm normalizes with batch statistics and, when ``buffers``
    is given, updates the running statistics in place; eval mode never mutates.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise ContractError(f"input width {x.shape[-1]} does not match spec width {spec.widths[0]}")
    ctx = MlpContext(spec=spec, prefix=prefix, train=bool(train), batch=x.shape[0])
    h = x
    for li in range(spec.n_layers):
        ctx.inputs.append(h)
        h = h @ params[f"{prefix}{li}.W"] + params[f"{prefix}{li}.b"]
        if spec.batch_norm[li]:
            if train:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                if buffers is not None:
                    B = h.shape[0]
                    unbiased = var * B / max(B - 1, 1)
                    rm, rv = buffers[f"{prefix}{li}.mean"], buffers[f"{prefix}{li}.var"]
                    rm *= 1.0 - BN_MOMENTUM
                    rm += BN_MOMENTUM * mu
                    rv *= 1.0 - BN_MOMENTUM
                    rv += BN_MOMENTUM * unbiased
            else:
                mu = buffers[f"{prefix}{li}.mean"]
                var = buffers[f"{prefix}{li}.var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (h - mu) * inv_std
            ctx.xhat.append(xhat)
            ctx.inv_std.append(inv_std)
            h = xhat * params[f"{prefix}{li}.gamma"] + params[f"{prefix}{li}.beta"]
        else:
            ctx.xhat.append(None)
            ctx.inv_std.append(None)
        h = _activate(spec.activations[li], h)
        ctx.post.append(h)
        rate = spec.dropout[li]
        if train and rate > 0.0:
            if rng is None:
                raise ContractError("dropout in train mode needs an explicit rng")
            keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
            ctx.masks.append(keep)
            h = h * keep
        else:
            ctx.masks.append(None)
    ctx.out_width = h.shape[1]
    return h, ctx


def mlp_backward(ctx: MlpContext, params, grad_out):
    """Reverse pass. Returns ``(param_grads, grad_input)``; BN batch statistics are differentiated."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != (ctx.batch, ctx.out_width):
        raise ContractError(f"output gradient shape {g.shape} does not match the forward call")
    spec, prefix = ctx.spec, ctx.prefix
    grads = {}
    for li in reversed(range(spec.n_layers)):
        if ctx.masks[li] is not None:
            g = g * ctx.masks[li]
        g = _activate_backward(spec.activations[li], ctx.post[li], g)
        if spec.batch_norm[li]:
            xhat = ctx.xhat[li]
            gamma = params[f"{prefix}{li}.gamma"]
            grads[f"{prefix}{li}.gamma"] = np.sum(g * xhat, axis=0)
            grads[f"{prefix}{li}.beta"] = np.sum(g, axis=0)
            gx = g * gamma
            if ctx.train:
                B = g.shape[0]
                g = ctx.inv_std[li] / B * (B * gx - gx.sum(axis=0) - xhat * np.sum(gx * xhat, axis=0))
            else:
                g = gx * ctx.inv_std[li]
        grads[f"{prefix}{li}.W"] = ctx.inputs[li].T @ g
        grads[f"{prefix}{li}.b"] = g.sum(axis=0)
        g = g @ params[f"{prefix}{li}.W"].T
    return grads, g


class Mlp:
    """A network bundle: spec, parameters, BN buffers and a version counter.

    ``version`` is bumped by every optimizer step so that a backward call with a
    context recorded before the step is rejected.
    """

    def __init__(self, spec: MlpSpec, rng, prefix="", zero_last=False):
        self.spec = spec
        self.prefix = prefix
        self.params, self.buffers = init_mlp(spec, rng, prefix, zero_last)
        self.version = 0

    def forward(self, x, train=False, rng=None):
        out, ctx = mlp_forward(self.spec, self.params, x, train, rng, self.buffers,
                               self.prefix)
        ctx.version = self.version
        return out, ctx

    def backward(self, ctx, grad_out):
        if getattr(ctx, "version", None) != self.version or ctx.spec != self.spec:
            raise ContractError("stale forward context: parameters changed since the forward call")
        return mlp_backward(ctx, self.params, grad_out)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def like(cls, params, lr, beta1=0.9, beta2=0.999, eps=1e-15):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam, applied in place to ``params``; returns ``(params, state)``."""
    for k in params:
        if params[k].shape != grads[k].shape or state.m[k].shape != params[k].shape:
            raise ContractError(f"shape mismatch for parameter {k!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state
