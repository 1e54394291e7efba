"""Training: pipeline forward/backward, total loss assembly, phase-gated Adam steps."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import COLUMNS, GaussianCloud, build_knn, init_cloud, softmax_rows, softmax_rows_backward
from .config import Config
from .deform import DeformationOutput, DeformField, apply_deformation, normalized_time
from .exceptions import InvalidInputError
from .geometry import Camera, geometry_backward, project_gaussians, quat_normalize_vjp
from .metrics import dssim_loss, l1_loss
from .nets import AdamState, adam_step, sigmoid
from .splat import RasterSettings, render_backward, render_forward
from .stdr import Phase, SepField, schedule_phase, spatial_awareness_loss, temporal_smoothness_loss

log = logging.getLogger(__name__)

CLOUD_LR = {
    "position": "lr_position",
    "rotation": "lr_rotation",
    "log_scale": "lr_scale",
    "color": "lr_color",
    "opacity": "lr_opacity",
    "mask": "lr_mask",
}
METRICS_HEADER = ["iteration", "phase", "l1", "dssim", "l_temp", "l_spatial", "total", "wall_ms"]


@dataclass
class Frame:
    image: np.ndarray
    camera: Camera
    t: int


@dataclass
class LossReport:
    l1: float
    dssim: float
    l_temp: float
    l_spatial: float
    total: float
    iteration: int
    phase: Phase

    def row(self):
        return [self.iteration, self.phase.name, repr(self.l1), repr(self.dssim), repr(self.l_temp),
                repr(self.l_spatial), repr(self.total)]


@dataclass
class TrainState:
    config: Config
    cloud: GaussianCloud
    sep: SepField | None
    deform: DeformField
    adam: dict
    iteration: int = 0
    cached_probs: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def K(self):
        return self.cloud.K

    def networks(self):
        nets = [self.deform.net]
        if self.sep is not None:
            nets.extend(self.sep.nets)
        return nets

    def network_params(self, which):
        if which == "deform":
            return self.deform.net.params
        out = {}
        for net in self.sep.nets:
            out.update(net.params)
        return out


def build_state(config: Config, points, colors, K, seed=None) -> TrainState:
    seed = config.seed if seed is None else int(seed)
    cloud = init_cloud(points, colors, K, seed)
    rng = np.random.default_rng([seed, 0x5E9])
    sep = None
    if config.use_stdr:
        sep = SepField(K, rng, hidden=config.hidden_width, zs_dim=config.zs_dim, zt_dim=config.zt_dim,
                       pos_freqs=config.pos_freqs, batch_norm=config.sep_batch_norm, dropout=config.sep_dropout)
    deform = DeformField(
        rng,
        zs_dim=config.zs_dim if config.use_stdr else 0,
        zt_dim=config.zt_dim if config.use_stdr else 0,
        hidden=config.hidden_width,
        n_layers=config.deform_layers,
        pos_freqs=config.pos_freqs,
        time_freqs=config.time_freqs,
        deform_color=config.deform_color,
        deform_opacity=config.deform_opacity,
        gate_by_pdyn=config.use_stdr and config.pdyn_gating,
    )
    state = TrainState(config=config, cloud=cloud, sep=sep, deform=deform, adam={})
    betas = dict(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    for name in COLUMNS:
        state.adam[f"cloud.{name}"] = AdamState.like({name: getattr(cloud, name)}, getattr(config, CLOUD_LR[name]),
                                                     **betas)
    state.adam["deform"] = AdamState.like(deform.net.params, config.lr_network, **betas)
    if sep is not None:
        state.adam["sep"] = AdamState.like(state.network_params("sep"), config.lr_network, **betas)
    if cloud.n > config.knn_k:
        cloud.knn = build_knn(cloud.position, config.knn_k)
    return state


def raster_settings(config: Config) -> RasterSettings:
    return RasterSettings(alpha_min=config.alpha_min, t_min=config.t_min)


@dataclass
class PipelineContext:
    phase: object
    t: int
    camera: Camera
    deform_on: bool
    probs: np.ndarray | None = None
    sep_ctx: object = None
    deform_ctx: object = None
    deformed: object = None
    proj_ctx: object = None
    render_ctx: object = None
    rgb: np.ndarray | None = None
    base_opacity: np.ndarray | None = None
    mask_sig: np.ndarray | None = None


def pipeline_forward(state: TrainState, camera: Camera, t: int, phase=None, train=False, rng=None,
                     settings: RasterSettings | None = None):
    """Render the scene at timestamp index ``t`` through the full model. Returns ``(image, ctx)``."""
    cfg = state.config
    cloud = state.cloud
    if not 0 <= int(t) < cloud.K:
        raise InvalidInputError(f"timestamp index {t} outside [0, {cloud.K})")
    phase = phase or schedule_phase(state.iteration, cfg.warm_up_end, cfg.reg_end)
    ctx = PipelineContext(phase=phase, t=int(t), camera=camera, deform_on=phase.deformation_active)
    if ctx.deform_on:
        tn = normalized_time(t, cloud.K)
        if state.sep is not None:
            if phase.tag == Phase.FROZEN:
                probs = state.cached_probs if state.cached_probs is not None else softmax_rows(cloud.mask)
            else:
                probs = softmax_rows(cloud.mask)
            ctx.probs = probs
            feats, ctx.sep_ctx = state.sep.forward(cloud.position, probs, train, rng)
            deltas, ctx.deform_ctx = state.deform.forward(cloud.position, tn, feats.z_s, feats.z_t, feats.p_dyn,
                                                          train, rng)
        else:
            deltas, ctx.deform_ctx = state.deform.forward(cloud.position, tn, train=train, rng=rng)
        d = apply_deformation(cloud, deltas)
        ctx.deformed = d
        pos, rot, ls, col, opa = d.position, d.rotation, d.log_scale, d.color, d.opacity
    else:
        pos, rot, ls, col, opa = cloud.position, cloud.rotation, cloud.log_scale, cloud.color, cloud.opacity
    splats, ctx.proj_ctx = project_gaussians(pos, rot, ls, camera)
    ctx.rgb = sigmoid(col)
    ctx.base_opacity = sigmoid(opa)
    alpha = ctx.base_opacity
    if cfg.use_stdr:
        ctx.mask_sig = sigmoid(cloud.mask[:, ctx.t])
        alpha = ctx.mask_sig * ctx.base_opacity
    out = render_forward(splats, ctx.rgb, alpha, camera.height, camera.width, cfg.background,
                         settings or raster_settings(cfg))
    ctx.render_ctx = out.context
    return out.image, ctx


def pipeline_backward(state: TrainState, ctx: PipelineContext, grad_image):
    """Gradients of a loss on the rendered image w.r.t. every trainable array.

    Keys are ``cloud.<column>`` plus the network parameter names.
    """
    cloud = state.cloud
    sg = render_backward(ctx.render_ctx, grad_image)
    g_pos, g_rot, g_ls = geometry_backward(ctx.proj_ctx, sg.mean2d, sg.cov2d)
    g_col = sg.color * ctx.rgb * (1.0 - ctx.rgb)
    g_base = sg.alpha
    grads = {f"cloud.{c}": np.zeros_like(getattr(cloud, c)) for c in COLUMNS}
    if ctx.mask_sig is not None:
        g_base = sg.alpha * ctx.mask_sig
        grads["cloud.mask"][:, ctx.t] += sg.alpha * ctx.base_opacity * ctx.mask_sig * (1.0 - ctx.mask_sig)
    g_opa = g_base * ctx.base_opacity * (1.0 - ctx.base_opacity)
    if ctx.deform_on:
        d = ctx.deformed
        g_rot = quat_normalize_vjp(d.rotation, d.rotation_norm, g_rot)
        g_def = DeformationOutput(dx=g_pos, dr=g_rot, ds=g_ls, dc=g_col, dalpha=g_opa)
        dgrads, gx, gzs, gzt, gpdyn, _ = state.deform.backward(ctx.deform_ctx, g_def)
        grads.update(dgrads)
        grads["cloud.position"] += gx
        if state.sep is not None:
            if gpdyn is None:
                gpdyn = np.zeros(cloud.n)
            sgrads, gx_s, g_probs = state.sep.backward(ctx.sep_ctx, gzs, gzt, gpdyn)
            grads.update(sgrads)
            grads["cloud.position"] += gx_s
            if ctx.phase.tag != Phase.FROZEN and state.config.sep_mask_gradient:
                grads["cloud.mask"] += softmax_rows_backward(ctx.probs, g_probs)
    grads["cloud.position"] += g_pos
    grads["cloud.rotation"] += g_rot
    grads["cloud.log_scale"] += g_ls
    grads["cloud.color"] += g_col
    grads["cloud.opacity"] += g_opa
    return grads


def compute_loss(state: TrainState, frame: Frame, phase, rng, train=True, settings=None, anchors=None):
    """Total loss and gradients for one frame. Returns ``(LossReport, grads)``."""
    cfg = state.config
    image, ctx = pipeline_forward(state, frame.camera, frame.t, phase, train, rng, settings)
    l1, g1 = l1_loss(image, frame.image)
    ds, g2 = dssim_loss(image, frame.image)
    lam = cfg.lambda_recon
    grads = pipeline_backward(state, ctx, lam * g1 + (1.0 - lam) * g2)
    l_temp = l_spatial = 0.0
    if cfg.use_stdr and phase.regularizers_active:
        l_temp, g_temp = temporal_smoothness_loss(state.cloud.mask, cfg.temporal_reduction == "mean")
        l_spatial, g_sp = spatial_awareness_loss(state.cloud.mask, state.cloud.knn, cfg.kl_samples, cfg.kl_cap,
                                                 rng, anchors)
        grads["cloud.mask"] += cfg.lambda_temp * g_temp + cfg.lambda_spatial * g_sp
    total = lam * l1 + (1.0 - lam) * ds + cfg.lambda_temp * l_temp + cfg.lambda_spatial * l_spatial
    report = LossReport(l1, ds, l_temp, l_spatial, total, state.iteration, phase.tag)
    return report, grads


def total_loss(state: TrainState, frame: Frame, phase, rng, train=True, settings=None, anchors=None) -> float:
    """Forward-only counterpart of :func:`compute_loss` (same rng consumption)."""
    cfg = state.config
    image, _ = pipeline_forward(state, frame.camera, frame.t, phase, train, rng, settings)
    lam = cfg.lambda_recon
    total = lam * l1_loss(image, frame.image)[0] + (1.0 - lam) * dssim_loss(image, frame.image)[0]
    if cfg.use_stdr and phase.regularizers_active:
        total += cfg.lambda_temp * temporal_smoothness_loss(state.cloud.mask, cfg.temporal_reduction == "mean")[0]
        total += cfg.lambda_spatial * spatial_awareness_loss(state.cloud.mask, state.cloud.knn, cfg.kl_samples,
                                                             cfg.kl_cap, rng, anchors)[0]
    return total


def recompose_total(report: LossReport, config: Config) -> float:
    gate = 0.0 if report.phase == Phase.FROZEN or not config.use_stdr else 1.0
    return (config.lambda_recon * report.l1 + (1.0 - config.lambda_recon) * report.dssim
            + gate * (config.lambda_temp * report.l_temp + config.lambda_spatial * report.l_spatial))


def _trainable_cloud_columns(config: Config, phase):
    if config.use_stdr and phase.tag == Phase.WARM_UP and not config.warmup_geometry:
        # masks learn alone while the rest of the canonical cloud is held fixed
        return ["mask"]
    cols = ["position", "rotation", "log_scale", "color"]
    if phase.opacity_trainable or not config.use_stdr:
        cols.append("opacity")
    if config.use_stdr and phase.masks_trainable:
        cols.append("mask")
    return cols


def train_step(state: TrainState, frame: Frame):
    """One optimization step on ``frame``; mutates and returns ``(state, LossReport)``."""
    cfg = state.config
    it = state.iteration
    if not 0 <= frame.t < state.K:
        raise InvalidInputError(f"frame timestamp {frame.t} outside [0, {state.K})")
    phase = schedule_phase(it, cfg.warm_up_end, cfg.reg_end)
    rng = np.random.default_rng([cfg.seed, it])
    if cfg.use_stdr:
        if phase.regularizers_active and it % cfg.knn_every == 0 and state.cloud.n > cfg.knn_k:
            state.cloud.knn = build_knn(state.cloud.position, cfg.knn_k)
        if phase.tag == Phase.FROZEN and state.cached_probs is None:
            state.cached_probs = softmax_rows(state.cloud.mask)
    report, grads = compute_loss(state, frame, phase, rng)
    if abs(recompose_total(report, cfg) - report.total) > 1e-12:
        raise AssertionError("loss recomposition identity violated")

    cloud = state.cloud
    for col in _trainable_cloud_columns(cfg, phase):
        adam_step({col: getattr(cloud, col)}, {col: grads[f"cloud.{col}"]}, state.adam[f"cloud.{col}"])
    if phase.deformation_active:
        adam_step(state.deform.net.params, {k: grads[k] for k in state.deform.net.params}, state.adam["deform"])
        state.deform.net.version += 1
        if state.sep is not None:
            sp = state.network_params("sep")
            adam_step(sp, {k: grads[k] for k in sp}, state.adam["sep"])
            for net in state.sep.nets:
                net.version += 1
    state.iteration += 1
    return state, report


def frame_order(seed, n_frames, iteration):
    """Index of the frame used at ``iteration``: a fresh seeded permutation per pass over the data."""
    epoch, pos = divmod(iteration, n_frames)
    perm = np.random.default_rng([seed, epoch, 0xF4A]).permutation(n_frames)
    return int(perm[pos])


def render_view(state: TrainState, camera: Camera, t: int, settings=None):
    """Eval-mode render at timestamp index ``t`` using the schedule phase the state is in."""
    image, _ = pipeline_forward(state, camera, t, train=False, settings=settings)
    return image


def train(config: Config, frames, points=None, colors=None, K=None, state: TrainState | None = None,
          out_dir=None, iterations=None):
    """Run (or resume) training; returns the final state.

    When ``out_dir`` is given, the metrics CSV is appended there and checkpoints are
    written at ``config.checkpoint_every`` and at the end.
    """
    from .checkpoint import save_checkpoint

    if not frames:
        raise InvalidInputError("dataset has no training frames")
    if state is None:
        state = build_state(config, points, colors, K)
    total = config.iterations if iterations is None else int(iterations)
    writer = fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        fresh = state.iteration == 0 or not metrics_path.exists()
        fh = open(metrics_path, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRICS_HEADER)
    try:
        while state.iteration < total:
            frame = frames[frame_order(config.seed, len(frames), state.iteration)]
            t0 = time.perf_counter()
            state, report = train_step(state, frame)
            wall = (time.perf_counter() - t0) * 1e3
            if writer is not None:
                writer.writerow(report.row() + [f"{wall:.3f}"])
            if state.iteration % 500 == 0:
                log.info("iter %d %s total=%.5f l1=%.5f", state.iteration, report.phase.name, report.total,
                         report.l1)
            if out_dir is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(state, Path(out_dir) / f"ckpt_{state.iteration:06d}.stdr")
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(state, Path(out_dir) / "final.stdr")
    return state
