"""Little-endian binary checkpoint of a full training state.

Layout::

    magic     4 bytes   b"STDR"
    version   u32
    N         u32       number of Gaussians
    K         u32       number of timestamps
    n_blocks  u32
    blocks    n_blocks x block

    block := name_len u16 | name (utf-8) | dtype u8 | ndim u8 | shape u32[ndim] | data

``dtype`` is 0 for float64, 1 for int64, 2 for raw bytes. Blocks appear in this
order: the six cloud columns (position, rotation, log_scale, color, opacity, mask),
the KNN table, the Adam moments of each cloud column, the network weights and
batch-norm buffers, the network Adam moments, the cached mask distribution (if
any), and finally a ``meta`` JSON block (config, iteration, Adam step counters).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cloud import COLUMNS
from .config import Config
from .exceptions import CheckpointError

MAGIC = b"STDR"
VERSION = 1
_DTYPES = {0: "<f8", 1: "<i8", 2: "u1"}


def _state_blocks(state):
    cloud = state.cloud
    blocks = [(f"cloud.{c}", getattr(cloud, c)) for c in COLUMNS]
    blocks.append(("cloud.knn", cloud.knn.astype(np.int64)))
    for c in COLUMNS:
        st = state.adam[f"cloud.{c}"]
        blocks.append((f"adam.cloud.{c}.m", st.m[c]))
        blocks.append((f"adam.cloud.{c}.v", st.v[c]))
    for net in state.networks():
        blocks.extend(sorted(net.params.items()))
        blocks.extend((f"buffer.{k}", v) for k, v in sorted(net.buffers.items()))
    for group in ("deform", "sep"):
        if group in state.adam:
            st = state.adam[group]
            blocks.extend((f"adam.{group}.m.{k}", v) for k, v in sorted(st.m.items()))
            blocks.extend((f"adam.{group}.v.{k}", v) for k, v in sorted(st.v.items()))
    if state.cached_probs is not None:
        blocks.append(("cached_probs", state.cached_probs))
    return blocks


def _meta(state):
    return {
        "config": state.config.to_dict(),
        "iteration": int(state.iteration),
        "seed": int(state.cloud.seed),
        "adam_steps": {k: int(v.step) for k, v in state.adam.items()},
        "extra": state.meta,
    }


def _encode_block(name, arr):
    if isinstance(arr, (bytes, bytearray)):
        code, data, shape = 2, bytes(arr), (len(arr),)
    else:
        a = np.asarray(arr)
        code = 1 if np.issubdtype(a.dtype, np.integer) else 0
        data = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        shape = a.shape
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape)
    return head + data


def save_checkpoint(state, path):
    blocks = _state_blocks(state)
    blocks.append(("meta", json.dumps(_meta(state), sort_keys=True).encode("utf-8")))
    out = bytearray(MAGIC)
    out += struct.pack("<IIII", VERSION, state.cloud.n, state.cloud.K, len(blocks))
    for name, arr in blocks:
        out += _encode_block(name, arr)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))
    return path


def read_blocks(path):
    """Parse a checkpoint into ``(header, {name: array_or_bytes})``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointError(f"bad header field 'magic' in {path}: expected b'STDR'")
    if len(raw) < 20:
        raise CheckpointError(f"truncated header in {path} (fields 'version', 'N', 'K')")
    version, n, k, n_blocks = struct.unpack_from("<IIII", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"bad header field 'version': {version} (supported: {VERSION})")
    pos = 20
    blocks = {}
    try:
        for _ in range(n_blocks):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode("utf-8")
            pos += ln
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            dt = np.dtype(_DTYPES[code])
            size = int(np.prod(shape)) * dt.itemsize
            if pos + size > len(raw):
                raise CheckpointError(f"block {name!r} runs past the end of the file")
            chunk = raw[pos:pos + size]
            pos += size
            blocks[name] = chunk if code == 2 else np.frombuffer(chunk, dtype=dt).reshape(shape).copy()
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt block table in {path}: {exc}") from exc
    header = {"version": version, "N": n, "K": k, "n_blocks": n_blocks}
    for c in COLUMNS:
        arr = blocks.get(f"cloud.{c}")
        if arr is None:
            raise CheckpointError(f"missing column block 'cloud.{c}'")
        if arr.shape[0] != n:
            raise CheckpointError(f"bad header field 'N': {n} but column {c!r} has {arr.shape[0]} rows")
    if blocks["cloud.mask"].shape[1] != k:
        raise CheckpointError(f"bad header field 'K': {k} but mask has {blocks['cloud.mask'].shape[1]} columns")
    if "meta" not in blocks:
        raise CheckpointError("missing 'meta' block")
    return header, blocks


def load_checkpoint(path):
    """Rebuild a :class:`~stdrgs.trainer.TrainState` bit-exactly from ``path``."""
    from .trainer import build_state

    header, blocks = read_blocks(path)
    meta = json.loads(blocks["meta"].decode("utf-8"))
    config = Config.from_dict(meta["config"])
    n, k = header["N"], header["K"]
    state = build_state(config, blocks["cloud.position"], np.full((n, 3), 0.5), k, seed=meta["seed"])
    cloud = state.cloud
    for c in COLUMNS:
        setattr(cloud, c, blocks[f"cloud.{c}"])
        st = state.adam[f"cloud.{c}"]
        st.m[c] = blocks[f"adam.cloud.{c}.m"]
        st.v[c] = blocks[f"adam.cloud.{c}.v"]
    cloud.knn = blocks["cloud.knn"]
    cloud.zero_grad()
    for net in state.networks():
        for key in net.params:
            net.params[key] = blocks[key]
        for key in net.buffers:
            net.buffers[key] = blocks[f"buffer.{key}"]
    for group in ("deform", "sep"):
        if group in state.adam:
            st = state.adam[group]
            for key in st.m:
                st.m[key] = blocks[f"adam.{group}.m.{key}"]
                st.v[key] = blocks[f"adam.{group}.v.{key}"]
    for name, step in meta["adam_steps"].items():
        state.adam[name].step = step
    state.iteration = meta["iteration"]
    state.cached_probs = blocks.get("cached_probs")
    state.meta = meta.get("extra", {})
    return state
