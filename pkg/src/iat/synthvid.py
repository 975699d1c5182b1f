"""Synthetic tracking videos with look-alike distractors and occluders.

Every video holds one persistent target whose appearance (shape, palette,
stripe texture) is a deterministic function of ``(seed, video_id)``.
Distractors re-use the appearance of targets from *other* videos, so a
model has to tell instances apart rather than just find "an object".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, CropConfig, DatasetSpec
from .geometry import CropWindow, crop_window, extract_crop

SHAPES = ("ellipse", "rect", "diamond", "triangle")


class DatasetParseError(ValueError):
    """A dataset directory could not be parsed."""


class SamplingError(ValueError):
    pass


@dataclass
class VideoSample:
    video_id: int
    frames: list[np.ndarray]
    boxes: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (self.video_id == other.video_id
                and self.meta == other.meta
                and len(self.frames) == len(other.frames)
                and all(np.array_equal(a, b) for a, b in zip(self.frames, other.frames))
                and len(self.boxes) == len(other.boxes)
                and all(np.array_equal(a, b) for a, b in zip(self.boxes, other.boxes)))


@dataclass
class TrainingPair:
    template: np.ndarray
    search: np.ndarray
    template_box: np.ndarray
    search_box: np.ndarray
    video_id: int
    template_index: int
    search_index: int


@dataclass(frozen=True)
class Appearance:
    shape: str
    aspect: float
    color: np.ndarray
    stripe_color: np.ndarray
    stripe_angle: float
    stripe_period: float


def appearance(seed: int, video_id: int) -> Appearance:
    """Seeded appearance signature of the target of ``video_id``."""
    rng = np.random.default_rng([seed, video_id, 0xA11])
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    color = rng.uniform(0.05, 0.95, size=3)
    # keep the stripes visible against the body color
    stripe = 1.0 - color + rng.normal(0, 0.1, size=3)
    return Appearance(
        shape=shape,
        aspect=float(np.exp(rng.uniform(-0.35, 0.35))),
        color=color,
        stripe_color=np.clip(stripe, 0, 1),
        stripe_angle=float(rng.uniform(0, math.pi)),
        stripe_period=float(rng.uniform(0.35, 0.9)),
    )


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round trips are bit-exact."""
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).astype(np.float32) / np.float32(255)


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u, v: coordinates normalized so the bounding box is [-1, 1]^2
    if kind == "ellipse":
        return u * u + v * v <= 1.0
    if kind == "rect":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if kind == "triangle":
        # apex at the top center, base along the bottom edge
        return (v <= 1.0) & (np.abs(u) <= (v + 1.0) / 2.0)
    raise ValueError(kind)


def _paint(canvas: np.ndarray, look: Appearance, box) -> None:
    cx, cy, w, h = box
    H, W, _ = canvas.shape
    x0, x1 = max(int(math.floor(cx - w / 2)), 0), min(int(math.ceil(cx + w / 2)), W)
    y0, y1 = max(int(math.floor(cy - h / 2)), 0), min(int(math.ceil(cy + h / 2)), H)
    if x1 <= x0 or y1 <= y0:
        return
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    u = (xs[None, :] - cx) / (w / 2)
    v = (ys[:, None] - cy) / (h / 2)
    mask = _shape_mask(look.shape, u, v)
    # stripes live in object coordinates, so they move and scale with it
    phase = (u * math.cos(look.stripe_angle) + v * math.sin(look.stripe_angle)) / look.stripe_period
    stripes = (np.floor(phase * 2) % 2 == 0)
    patch = np.where(stripes[..., None], look.color, look.stripe_color)
    region = canvas[y0:y1, x0:x1]
    region[mask] = patch[mask]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    import cv2

    base = rng.uniform(0.25, 0.75, size=3)
    coarse = rng.normal(0, 0.12, size=(6, 6, 3)).astype(np.float32)
    smooth = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    fine = rng.normal(0, 0.02, size=(size, size, 3))
    return np.clip(base + smooth + fine, 0, 1)


class _Mover:
    """Constant-speed random walk confined to the frame, with optional size breathing."""

    def __init__(self, rng, size, base_w, base_h, speed, scale_var, frames):
        self.rng = rng
        self.size = size
        self.base = (base_w, base_h)
        self.speed = speed
        self.scale_var = scale_var
        self.period = rng.uniform(0.8, 2.0) * frames
        self.phase = rng.uniform(0, 2 * math.pi)
        margin_w = base_w * (1 + scale_var) / 2 + 1
        margin_h = base_h * (1 + scale_var) / 2 + 1
        self.lo = np.array([margin_w, margin_h])
        self.hi = np.array([size - margin_w, size - margin_h])
        self.pos = rng.uniform(self.lo, self.hi)
        self.heading = rng.uniform(0, 2 * math.pi)

    def box(self, t: int) -> np.ndarray:
        s = 1.0 + self.scale_var * math.sin(2 * math.pi * t / self.period + self.phase)
        return np.array([self.pos[0], self.pos[1], self.base[0] * s, self.base[1] * s])

    def advance(self) -> None:
        self.heading += self.rng.normal(0, 0.3)
        step = self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])
        nxt = self.pos + step
        for k in range(2):
            if nxt[k] < self.lo[k] or nxt[k] > self.hi[k]:
                step[k] = -step[k]
                self.heading = math.atan2(step[1], step[0])
        self.pos = np.clip(self.pos + step, self.lo, self.hi)


def generate_video(spec: DatasetSpec, video_id: int, first_id: int = 0) -> VideoSample:
    rng = np.random.default_rng([spec.seed, video_id])
    size = spec.image_size
    T = spec.frames_per_video
    look = appearance(spec.seed, video_id)

    base = rng.uniform(*spec.target_size)
    tw, th = base * math.sqrt(look.aspect), base / math.sqrt(look.aspect)
    speed = float(rng.uniform(*spec.speed))
    target = _Mover(rng, size, tw, th, speed, spec.scale_variation, T)

    n_distract = int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1))
    distractors = []
    for k in range(n_distract):
        if spec.num_videos > 1:
            other = first_id + int(rng.integers(spec.num_videos - 1))
            other = other + 1 if other >= video_id else other
        else:
            other = video_id + 1 + k
        dlook = appearance(spec.seed, other)
        dbase = rng.uniform(*spec.target_size)
        dw, dh = dbase * math.sqrt(dlook.aspect), dbase / math.sqrt(dlook.aspect)
        dspeed = float(rng.uniform(*spec.speed))
        distractors.append((dlook, _Mover(rng, size, dw, dh, dspeed, spec.scale_variation, T)))

    # occluder parameters are always drawn so the stream does not depend on the flag
    occluded = bool(rng.uniform() < spec.occlusion_prob)
    start = int(rng.integers(1, max(T - 1, 2)))
    length = int(rng.integers(2, max(3, T // 3)))
    occ_cover = float(rng.uniform(0.3, 0.8))
    occ_side = int(rng.integers(4))
    occ_color = rng.uniform(0.3, 0.7, size=3)
    occ_frames = set(range(start, min(start + length, T))) if occluded else set()

    background = _background(rng, size)
    frames, boxes = [], []
    for t in range(T):
        canvas = background.copy()
        for dlook, mover in distractors:
            _paint(canvas, dlook, mover.box(t))
        box = target.box(t)
        _paint(canvas, look, box)
        if t in occ_frames:
            cx, cy, w, h = box
            # a bar covering a fraction occ_cover of the box from one side
            if occ_side in (0, 1):
                ow, oh = w * occ_cover, h + 6
                ox = cx - w / 2 + ow / 2 if occ_side == 0 else cx + w / 2 - ow / 2
                obox = (ox, cy, ow, oh)
            else:
                ow, oh = w + 6, h * occ_cover
                oy = cy - h / 2 + oh / 2 if occ_side == 2 else cy + h / 2 - oh / 2
                obox = (cx, oy, ow, oh)
            occ = Appearance("rect", 1.0, occ_color, occ_color * 0.8, 0.0, 1.0)
            _paint(canvas, occ, obox)
        frames.append(quantize(canvas))
        boxes.append(box.astype(np.float64))
        target.advance()
        for _, mover in distractors:
            mover.advance()

    meta = {"distractor_count": n_distract, "occlusion": occluded, "speed": speed}
    return VideoSample(video_id=video_id, frames=frames, boxes=boxes, meta=meta)


def generate_dataset(spec: DatasetSpec, first_id: int = 0) -> list[VideoSample]:
    """Generate ``spec.num_videos`` videos with ids ``first_id, first_id + 1, ...``."""
    spec.validate()
    return [generate_video(spec, first_id + i, first_id) for i in range(spec.num_videos)]


def validate_video(video: VideoSample) -> None:
    """Raise ValueError if ``video`` breaks any VideoSample invariant."""
    if len(video.frames) != len(video.boxes) or len(video.frames) < 2:
        raise ValueError(f"video {video.video_id}: need >= 2 frames with one box each")
    for t, (frame, box) in enumerate(zip(video.frames, video.boxes)):
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise ValueError(f"video {video.video_id} frame {t}: bad shape {frame.shape}")
        if frame.min() < 0 or frame.max() > 1:
            raise ValueError(f"video {video.video_id} frame {t}: values outside [0, 1]")
        H, W = frame.shape[:2]
        cx, cy, w, h = box
        if not (w > 0 and h > 0):
            raise ValueError(f"video {video.video_id} frame {t}: non-positive box size")
        if cx - w / 2 < 0 or cy - h / 2 < 0 or cx + w / 2 > W or cy + h / 2 > H:
            raise ValueError(f"video {video.video_id} frame {t}: box {box} leaves the frame")


def validate_dataset(videos: list[VideoSample]) -> None:
    ids = [v.video_id for v in videos]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate video ids")
    for v in videos:
        validate_video(v)


# -- pair sampling ----------------------------------------------------------

def _jittered_window(box, area_factor, out_size, jitter, scale_jitter, rng) -> CropWindow:
    cx, cy, w, h = box
    base = math.sqrt(area_factor * w * h)
    # the window must stay wide enough to contain the whole box
    min_scale = 1.05 * max(w, h) / base
    scale = max(math.exp(scale_jitter * rng.standard_normal()), min_scale) if scale_jitter else max(1.0, min_scale)
    side = base * scale
    s = math.sqrt(w * h)
    shift = jitter * s * rng.uniform(-1, 1, size=2) if jitter else np.zeros(2)
    # clamp the shift so the box stays inside the window
    room = np.array([(side - w) / 2, (side - h) / 2])
    shift = np.clip(shift, -room, room)
    return crop_window(box, area_factor, out_size, shift=tuple(shift), scale=scale)


def sample_pair(dataset: list[VideoSample], rng: np.random.Generator,
                crop: CropConfig | None = None) -> TrainingPair:
    """Draw a template/search pair from one randomly chosen video."""
    crop = crop or CropConfig()
    if not dataset:
        raise SamplingError("cannot sample from an empty dataset")
    video = dataset[int(rng.integers(len(dataset)))]
    n = len(video.frames)
    if n < 2:
        raise SamplingError(f"video {video.video_id} has {n} frame(s); pairs need 2")
    ti, si = (int(i) for i in rng.choice(n, size=2, replace=False))

    tbox, sbox = video.boxes[ti], video.boxes[si]
    twin = _jittered_window(tbox, crop.template_area_factor, crop.template_size,
                            crop.center_jitter, crop.scale_jitter, rng)
    swin = _jittered_window(sbox, crop.search_area_factor, crop.search_size,
                            crop.center_jitter, crop.scale_jitter, rng)
    return TrainingPair(
        template=extract_crop(video.frames[ti], twin),
        search=extract_crop(video.frames[si], swin),
        template_box=twin.to_crop(tbox),
        search_box=swin.to_crop(sbox),
        video_id=video.video_id,
        template_index=ti,
        search_index=si,
    )


# -- persistence ------------------------------------------------------------

def save_dataset(videos: list[VideoSample], root: str | Path) -> None:
    """Write ``<root>/<id>/frames/%05d.png`` + ``groundtruth.txt`` per video."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = {"videos": [{"video_id": v.video_id, "meta": v.meta} for v in videos]}
    for v in videos:
        vdir = root / str(v.video_id)
        (vdir / "frames").mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(v.frames):
            img = np.round(np.asarray(frame) * 255).astype(np.uint8)
            Image.fromarray(img, mode="RGB").save(vdir / "frames" / f"{t:05d}.png", format="PNG")
        with open(vdir / "groundtruth.txt", "w") as fh:
            for t, box in enumerate(v.boxes):
                fh.write(f"{t} " + " ".join(repr(float(x)) for x in box) + "\n")
    with open(root / "index.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)


def read_annotations(path: Path, video_id, num_frames: int | None = None) -> list[np.ndarray]:
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DatasetParseError(
                    f"video {video_id}, frame {len(boxes)}: expected 'frame_idx cx cy w h' "
                    f"at line {lineno}, got {line.strip()!r}")
            try:
                idx = int(parts[0])
                box = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DatasetParseError(
                    f"video {video_id}, frame {len(boxes)}: unparsable line {lineno}") from exc
            if idx != len(boxes):
                raise DatasetParseError(
                    f"video {video_id}, frame {len(boxes)}: line {lineno} has frame index {idx}")
            boxes.append(box)
    if num_frames is not None and len(boxes) != num_frames:
        raise DatasetParseError(
            f"video {video_id}, frame {len(boxes)}: annotation missing "
            f"({len(boxes)} boxes for {num_frames} frames)")
    return boxes


def load_video(vdir: Path, video_id: int, meta: dict | None = None) -> VideoSample:
    frame_files = sorted((vdir / "frames").glob("*.png"))
    frames = []
    for t, f in enumerate(frame_files):
        if f.name != f"{t:05d}.png":
            raise DatasetParseError(f"video {video_id}, frame {t}: expected {t:05d}.png, found {f.name}")
        try:
            arr = np.asarray(Image.open(f).convert("RGB"))
        except OSError as exc:
            raise DatasetParseError(f"video {video_id}, frame {t}: unreadable image") from exc
        frames.append(arr.astype(np.float32) / np.float32(255))
    boxes = read_annotations(vdir / "groundtruth.txt", video_id, len(frames))
    return VideoSample(video_id=video_id, frames=frames, boxes=boxes, meta=dict(meta or {}))


def load_dataset(root: str | Path) -> list[VideoSample]:
    root = Path(root)
    try:
        with open(root / "index.json") as fh:
            index = json.load(fh)
        entries = index["videos"]
    except (OSError, ValueError, KeyError) as exc:
        raise DatasetParseError(f"{root}: missing or malformed index.json") from exc
    return [load_video(root / str(e["video_id"]), int(e["video_id"]), e.get("meta"))
            for e in entries]


def spec_from_mapping(d: dict) -> DatasetSpec:
    try:
        spec = DatasetSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    spec.validate()
    return spec
