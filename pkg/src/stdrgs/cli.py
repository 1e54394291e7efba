"""Command-line entry point: ``stdrgs {generate,train,render,eval,inspect-masks}``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .cloud import softmax_rows
from .config import Config
from .exceptions import InvalidInputError, InvalidParameterError
from .metrics import psnr, ssim
from .scenes import SceneSpec, generate_scene, load_dataset, save_dataset, write_png
from .trainer import build_state, render_view, train

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO = 0, 1, 2, 3
EVAL_HEADER = ["camera", "t", "psnr", "ssim"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_config_flags(p):
    """One override flag per config field; unset flags leave the file/default value."""
    g = p.add_argument_group("config overrides")
    for f in dataclasses.fields(Config):
        if f.name == "iterations":
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", action=argparse.BooleanOptionalAction,
                           default=None)
        elif isinstance(default, list):
            g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=float, nargs=len(default), default=None,
                           metavar=("R", "G", "B"))
        else:
            g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=type(default), default=None,
                           metavar=f.name.upper())


def effective_config(args) -> Config:
    """Defaults, then the config file, then command-line flags (flags win)."""
    base = Config.from_file(args.config).to_dict() if args.config else Config().to_dict()
    for name in Config.field_names():
        v = getattr(args, f"cfg_{name}", None)
        if v is not None:
            base[name] = v
    if args.no_stdr:
        base["use_stdr"] = False
    if args.iterations is not None:
        base["iterations"] = args.iterations
    return Config.from_dict(base)


def cmd_generate(args):
    spec = SceneSpec(K=args.K, n_static=args.n_static, n_dynamic=args.n_dynamic, motion=args.motion,
                     amplitude=args.amplitude, n_cameras=args.cameras, n_heldout=args.heldout,
                     radius=args.radius, elevation=args.elevation, fov=args.fov, width=args.width,
                     height=args.height, seed=args.seed)
    ds = generate_scene(spec)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: N={len(ds.init_points)} points, K={ds.K}, {len(ds.frames)} frames "
          f"({len(ds.train_cameras)} training cameras, {len(ds.heldout_cameras)} held out)")
    return EXIT_OK


def cmd_train(args):
    ds = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = ds.split("train")
    if args.resume:
        state = load_checkpoint(args.resume)
        if state.K != ds.K or state.cloud.n != len(ds.init_points):
            raise InvalidInputError("checkpoint does not match the dataset (N or K differ)")
        config = state.config
        if args.iterations is not None:
            config = config.replace(iterations=args.iterations)
            state.config = config
    else:
        config = effective_config(args)
        state = build_state(config, ds.init_points, ds.init_colors, ds.K)
    config.save(out / "config.json")
    state = train(config, frames, state=state, out_dir=out)
    print(f"trained to iteration {state.iteration}; checkpoint {out / 'final.stdr'}")
    return EXIT_OK


def _camera(ds, cam_id):
    if not 0 <= cam_id < len(ds.cameras):
        raise InvalidInputError(f"camera id {cam_id} outside [0, {len(ds.cameras)})")
    return ds.cameras[cam_id]


def cmd_render(args):
    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    if not 0 <= args.t < state.K:
        raise InvalidInputError(f"timestamp index {args.t} outside [0, {state.K})")
    image = render_view(state, _camera(ds, args.camera), args.t)
    write_png(args.out, image)
    print(f"wrote {args.out}")
    return EXIT_OK


def evaluate(state, ds, split="heldout"):
    """Per-frame ``(camera, t, psnr, ssim)`` rows on ``split``."""
    ids = ds.frame_ids(split)
    if not ids:
        raise InvalidInputError(f"the {split} split is empty")
    rows = []
    for (cam, t), frame in zip(ids, ds.split(split)):
        pred = render_view(state, frame.camera, t)
        rows.append((cam, t, psnr(pred, frame.image), ssim(pred, frame.image)))
    return rows


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    rows = evaluate(state, ds, args.split)
    mean_p = float(np.mean([r[2] for r in rows]))
    mean_s = float(np.mean([r[3] for r in rows]))
    lines = [EVAL_HEADER] + [[c, t, repr(float(p)), repr(float(s))] for c, t, p, s in rows]
    lines.append(["mean", "", repr(mean_p), repr(mean_s)])
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(lines)
    w = csv.writer(sys.stdout)
    w.writerows(lines)
    return EXIT_OK


def mask_entropy(probs):
    """Shannon entropy (nats) of each row."""
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=1)


def cmd_inspect_masks(args):
    state = load_checkpoint(args.checkpoint)
    probs = state.cached_probs if state.cached_probs is not None else softmax_rows(state.cloud.mask)
    ent = mask_entropy(probs)
    K = probs.shape[1]
    dyn = None
    if args.dataset:
        dyn = load_dataset(args.dataset).init_dynamic
        if dyn.shape[0] != probs.shape[0]:
            raise InvalidInputError("dataset point count does not match the checkpoint")
    header = ["gaussian"] + [f"t{k}" for k in range(K)] + ["entropy"] + (["dynamic"] if dyn is not None else [])
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(header)
        for i in range(probs.shape[0]):
            row = [i] + [repr(float(v)) for v in probs[i]] + [repr(float(ent[i]))]
            if dyn is not None:
                row.append(int(dyn[i]))
            w.writerow(row)
    finally:
        if args.out:
            out.close()
    summary = {"lnK": float(np.log(K)), "mean_entropy": float(ent.mean())}
    if dyn is not None:
        if dyn.any():
            summary["dynamic_mean_entropy"] = float(ent[dyn].mean())
        if (~dyn).any():
            summary["static_mean_entropy"] = float(ent[~dyn].mean())
            summary["static_median_entropy"] = float(np.median(ent[~dyn]))
    print(json.dumps(summary), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def build_parser():
    p = _Parser(prog="stdrgs", description="Dynamic Gaussian splatting with spatio-temporal decoupling masks.")
    p.add_argument("--version", action="version",
                   version=f"stdrgs {__version__} (numpy {np.__version__}, python {sys.version.split()[0]})")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="render a synthetic dynamic scene to a dataset directory")
    g.add_argument("out")
    d = SceneSpec.__dataclass_fields__
    g.add_argument("--K", type=int, default=d["K"].default)
    g.add_argument("--n-static", type=int, default=d["n_static"].default)
    g.add_argument("--n-dynamic", type=int, default=d["n_dynamic"].default)
    g.add_argument("--motion", default=d["motion"].default)
    g.add_argument("--amplitude", type=float, default=d["amplitude"].default)
    g.add_argument("--cameras", type=int, default=d["n_cameras"].default)
    g.add_argument("--heldout", type=int, default=d["n_heldout"].default)
    g.add_argument("--radius", type=float, default=d["radius"].default)
    g.add_argument("--elevation", type=float, default=d["elevation"].default)
    g.add_argument("--fov", type=float, default=d["fov"].default)
    g.add_argument("--width", type=int, default=d["width"].default)
    g.add_argument("--height", type=int, default=d["height"].default)
    g.add_argument("--seed", type=int, default=d["seed"].default)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("dataset")
    t.add_argument("out")
    t.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    t.add_argument("--no-stdr", action="store_true", help="baseline: no masks, no regularizers, position-only field")
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--resume", help="checkpoint to continue from (its config is used)")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one view from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("dataset", help="dataset directory providing the cameras")
    r.add_argument("--camera", type=int, required=True)
    r.add_argument("--t", type=int, required=True, help="timestamp index")
    r.add_argument("-o", "--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="per-frame and mean PSNR / SSIM")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--split", choices=("heldout", "train"), default="heldout")
    e.add_argument("-o", "--out", help="CSV path (the table is printed to stdout as well)")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("inspect-masks", help="dump the N x K mask distribution and per-Gaussian entropy")
    m.add_argument("checkpoint")
    m.add_argument("--dataset", help="adds the ground-truth dynamic flag column and group summaries")
    m.add_argument("-o", "--out", help="CSV path (stdout if omitted)")
    m.set_defaults(func=cmd_inspect_masks)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (generate, train, render, eval, inspect-masks)")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (InvalidInputError, InvalidParameterError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
