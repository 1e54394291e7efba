"""Synthetic dynamic scenes with a deliberately ghosted canonical initialization,
dataset persistence (JSON manifest plus 8-bit PNGs) and evaluation metrics.

Dataset directory layout::

    manifest.json
    images/cam{c}_t{t}.png

Manifest fields: ``format``, ``version``, ``K``, ``width``, ``height``, ``cameras``
(list of camera dicts, index = camera id), ``train_cameras``, ``heldout_cameras``,
``frames`` (``camera``, ``t``, ``file``), ``init_points``, ``init_colors``,
``init_dynamic`` (ground-truth dynamic flag per initial point, evaluation only),
``trajectory`` (K blob centres, evaluation only) and ``spec``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DatasetError, InvalidInputError
from .geometry import Camera, project_gaussians
from .metrics import psnr, ssim  # noqa: F401  (re-exported evaluation metrics)
from .splat import RasterSettings, render_forward

FORMAT = "stdrgs-dataset"
FORMAT_VERSION = 1
MOTIONS = ("linear", "circular")


@dataclass
class SceneSpec:
    K: int = 8
    n_static: int = 200
    n_dynamic: int = 50
    motion: str = "circular"
    amplitude: float = 2.0
    n_cameras: int = 13
    n_heldout: int = 1
    radius: float = 4.0
    elevation: float = 25.0
    fov: float = 45.0
    width: int = 64
    height: int = 64
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.K < 2:
            raise InvalidInputError(f"K must be >= 2 (got {self.K})")
        if self.n_static < 0 or self.n_dynamic < 0:
            raise InvalidInputError("Gaussian counts must be >= 0")
        if self.n_static + self.n_dynamic == 0:
            raise InvalidInputError("scene needs at least one Gaussian")
        if self.motion not in MOTIONS:
            raise InvalidInputError(f"motion must be one of {MOTIONS} (got {self.motion!r})")
        if self.amplitude < 0:
            raise InvalidInputError("amplitude must be >= 0")
        if self.n_cameras < 1:
            raise InvalidInputError("need at least one camera")
        if not 0 <= self.n_heldout < self.n_cameras:
            raise InvalidInputError("n_heldout must leave at least one training camera")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image size must be positive")
        if not 0 < self.fov < 180:
            raise InvalidInputError("fov must be in (0, 180) degrees")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class GroundTruth:
    """Time-varying Gaussian set used to render the targets (never seen by training)."""

    static_position: np.ndarray
    dynamic_offset: np.ndarray
    trajectory: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    color: np.ndarray
    opacity: np.ndarray

    def positions_at(self, t):
        return np.concatenate([self.static_position, self.dynamic_offset + self.trajectory[t]])


@dataclass
class DatasetFrame:
    camera: int
    t: int
    file: str
    image: np.ndarray | None = None


@dataclass
class Dataset:
    K: int
    width: int
    height: int
    cameras: list
    train_cameras: list
    heldout_cameras: list
    frames: list
    init_points: np.ndarray
    init_colors: np.ndarray
    init_dynamic: np.ndarray
    trajectory: np.ndarray
    spec: dict = field(default_factory=dict)
    ground_truth: GroundTruth | None = None

    def validate(self):
        for fr in self.frames:
            if not 0 <= fr.t < self.K:
                raise InvalidInputError(f"frame {fr.file}: timestamp index {fr.t} outside [0, {self.K})")
            if not 0 <= fr.camera < len(self.cameras):
                raise InvalidInputError(f"frame {fr.file}: unknown camera {fr.camera}")
            if fr.image is not None and fr.image.shape != (self.height, self.width, 3):
                raise InvalidInputError(f"frame {fr.file}: image shape {fr.image.shape} does not match "
                                        f"{self.height}x{self.width}x3")
        if len(self.init_points) != len(self.init_colors) or len(self.init_points) != len(self.init_dynamic):
            raise InvalidInputError("init_points, init_colors and init_dynamic lengths differ")

    def split(self, which="train"):
        """Trainer frames for the ``train`` or ``heldout`` cameras."""
        from .trainer import Frame

        if which not in ("train", "heldout"):
            raise InvalidInputError(f"unknown split {which!r}")
        cams = set(self.train_cameras if which == "train" else self.heldout_cameras)
        return [Frame(fr.image, self.cameras[fr.camera], fr.t) for fr in self.frames if fr.camera in cams]

    def frame_ids(self, which="train"):
        cams = set(self.train_cameras if which == "train" else self.heldout_cameras)
        return [(fr.camera, fr.t) for fr in self.frames if fr.camera in cams]


def trajectory(spec: SceneSpec) -> np.ndarray:
    """Blob centre at every timestamp, shape ``(K, 3)``."""
    s = np.arange(spec.K) / (spec.K - 1)
    out = np.zeros((spec.K, 3))
    if spec.motion == "linear":
        out[:, 0] = spec.amplitude * (s - 0.5)
    else:
        ang = 2.0 * np.pi * np.arange(spec.K) / spec.K
        out[:, 0] = 0.5 * spec.amplitude * np.cos(ang)
        out[:, 1] = 0.5 * spec.amplitude * np.sin(ang)
    out[:, 2] = 0.3
    return out


def camera_ring(spec: SceneSpec):
    elev = np.deg2rad(spec.elevation)
    fx = 0.5 * spec.width / np.tan(0.5 * np.deg2rad(spec.fov))
    cams = []
    for c in range(spec.n_cameras):
        az = 2.0 * np.pi * c / spec.n_cameras + 0.25
        eye = spec.radius * np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)])
        cams.append(Camera.look_at(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], spec.width, spec.height, fx))
    return cams


def _ground_truth(spec: SceneSpec, rng) -> GroundTruth:
    ns, nd = spec.n_static, spec.n_dynamic
    # static set: a textured floor disk plus four coloured pillars
    n_floor = ns - ns // 3
    n_pillar = ns - n_floor
    r = 1.8 * np.sqrt(rng.uniform(0, 1, n_floor))
    th = rng.uniform(0, 2 * np.pi, n_floor)
    floor = np.stack([r * np.cos(th), r * np.sin(th), rng.uniform(-0.55, -0.45, n_floor)], axis=1)
    checker = (np.floor(floor[:, 0] * 1.5) + np.floor(floor[:, 1] * 1.5)) % 2
    floor_col = np.where(checker[:, None] > 0, [0.75, 0.75, 0.7], [0.25, 0.35, 0.3])
    floor_col = floor_col + rng.uniform(-0.05, 0.05, (n_floor, 3))
    which = rng.integers(0, 4, n_pillar)
    ang = np.pi / 4 + which * np.pi / 2
    pillar = np.stack([1.4 * np.cos(ang) + rng.normal(0, 0.08, n_pillar),
                       1.4 * np.sin(ang) + rng.normal(0, 0.08, n_pillar),
                       rng.uniform(-0.5, 0.7, n_pillar)], axis=1)
    palette = np.array([[0.2, 0.3, 0.9], [0.9, 0.8, 0.2], [0.2, 0.8, 0.3], [0.7, 0.3, 0.8]])
    pillar_col = palette[which] + rng.uniform(-0.05, 0.05, (n_pillar, 3))
    # dynamic blob, rigidly translated along the trajectory
    offset = rng.normal(0, 0.12, (nd, 3))
    blob_col = np.clip(np.array([0.95, 0.35, 0.1]) + rng.uniform(-0.1, 0.1, (nd, 3)), 0.02, 0.98)
    n = ns + nd
    rot = rng.normal(0, 1, (n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    scale = np.concatenate([np.full(n_floor, 0.12), np.full(n_pillar, 0.09), np.full(nd, 0.07)])
    log_scale = np.log(scale)[:, None] + rng.uniform(-0.2, 0.2, (n, 3))
    color = np.clip(np.concatenate([floor_col, pillar_col, blob_col]), 0.02, 0.98)
    opacity = np.concatenate([np.full(ns, 0.85), np.full(nd, 0.9)])
    return GroundTruth(np.concatenate([floor, pillar]).reshape(ns, 3), offset, trajectory(spec), rot, log_scale,
                       color, opacity)


def render_ground_truth(gt: GroundTruth, camera: Camera, t, background=(0.0, 0.0, 0.0)):
    """Exact-mode (no thresholds) render of the true scene at timestamp ``t``."""
    splats, _ = project_gaussians(gt.positions_at(t), gt.rotation, gt.log_scale, camera)
    out = render_forward(splats, gt.color, gt.opacity, camera.height, camera.width, background,
                         RasterSettings.exact())
    return out.image


def generate_scene(spec: SceneSpec) -> Dataset:
    """Render every (camera, timestamp) pair and build the ghosted initialization:
    static positions plus one copy of the dynamic blob per timestamp."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    gt = _ground_truth(spec, rng)
    cams = camera_ring(spec)
    heldout = list(range(spec.n_cameras - spec.n_heldout, spec.n_cameras))
    train_cams = [c for c in range(spec.n_cameras) if c not in heldout]
    frames = []
    for c, cam in enumerate(cams):
        for t in range(spec.K):
            frames.append(DatasetFrame(c, t, f"images/cam{c}_t{t}.png", render_ground_truth(gt, cam, t)))
    ns = spec.n_static
    dyn = [gt.dynamic_offset + gt.trajectory[t] for t in range(spec.K)] if spec.n_dynamic else []
    init_points = np.concatenate([gt.static_position] + dyn) if dyn else gt.static_position.copy()
    init_colors = np.concatenate([gt.color[:ns]] + [gt.color[ns:]] * (spec.K if spec.n_dynamic else 0))
    init_dynamic = np.concatenate([np.zeros(ns, bool), np.ones(spec.n_dynamic * spec.K, bool)])
    ds = Dataset(spec.K, spec.width, spec.height, cams, train_cams, heldout, frames, init_points, init_colors,
                 init_dynamic, gt.trajectory, spec.to_dict(), gt)
    ds.validate()
    return ds


def quantize(image):
    """[0, 1] floats to 8-bit."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(image), mode="RGB").save(path, format="PNG")


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _manifest(ds: Dataset) -> dict:
    return {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "K": int(ds.K),
        "width": int(ds.width),
        "height": int(ds.height),
        "cameras": [c.to_dict() for c in ds.cameras],
        "train_cameras": [int(c) for c in ds.train_cameras],
        "heldout_cameras": [int(c) for c in ds.heldout_cameras],
        "frames": [{"camera": int(f.camera), "t": int(f.t), "file": f.file} for f in ds.frames],
        "init_points": np.asarray(ds.init_points, dtype=np.float64).tolist(),
        "init_colors": np.asarray(ds.init_colors, dtype=np.float64).tolist(),
        "init_dynamic": [bool(v) for v in ds.init_dynamic],
        "trajectory": np.asarray(ds.trajectory, dtype=np.float64).tolist(),
        "spec": ds.spec,
    }


def save_dataset(ds: Dataset, path):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for fr in ds.frames:
        if fr.image is None:
            raise InvalidInputError(f"frame {fr.file} has no image to save")
        write_png(root / fr.file, fr.image)
    (root / "manifest.json").write_text(json.dumps(_manifest(ds), indent=1) + "\n", encoding="utf-8")
    return root


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        m = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetError(f"missing manifest file {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"malformed manifest {mpath}: {exc}") from exc
    if m.get("format") != FORMAT:
        raise InvalidInputError(f"{mpath}: not a {FORMAT} manifest")
    try:
        K = int(m["K"])
        cameras = [Camera.from_dict(c) for c in m["cameras"]]
        frames = []
        for f in m["frames"]:
            fr = DatasetFrame(int(f["camera"]), int(f["t"]), str(f["file"]))
            if not 0 <= fr.t < K:
                raise InvalidInputError(f"{mpath}: frame {fr.file} has timestamp index {fr.t} >= K={K}")
            frames.append(fr)
        ds = Dataset(K, int(m["width"]), int(m["height"]), cameras, list(m["train_cameras"]),
                     list(m["heldout_cameras"]), frames, np.asarray(m["init_points"], dtype=np.float64).reshape(-1, 3),
                     np.asarray(m["init_colors"], dtype=np.float64).reshape(-1, 3),
                     np.asarray(m["init_dynamic"], dtype=bool), np.asarray(m["trajectory"], dtype=np.float64),
                     m.get("spec", {}))
    except KeyError as exc:
        raise InvalidInputError(f"{mpath}: missing manifest field {exc}") from exc
    for fr in ds.frames:
        fpath = root / fr.file
        if not fpath.is_file():
            raise DatasetError(f"missing image file {fpath}")
        try:
            fr.image = read_png(fpath)
        except OSError as exc:
            raise DatasetError(f"cannot read image file {fpath}: {exc}") from exc
    ds.validate()
    return ds
