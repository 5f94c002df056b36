"""Procedural referring-video scenes: moving colored shapes on a dark canvas.

Each scene contains 2-6 objects (circle / square / triangle in one of eight
colors) translating or bouncing across the frame.  Exactly one object -- the
referent -- is uniquely identified by its (color, shape, motion) triple, and
the sample carries a short referring expression for it ("the red circle
moving left").  Ground truth is the referent's per-frame mask; every other
object is a distractor and at least one distractor shares an attribute with
the referent so the expression actually has to be read.

Rasterization is hard-edged (no anti-aliasing) so masks coincide exactly
with the pixels painted in the referent's color.  The referent is drawn on
top of all distractors and its trajectory is kept fully inside the frame,
which keeps its mask identical to its rasterized shape in every frame.

Samples can be exported to / re-read from a DAVIS-style directory layout::

    <root>/JPEGImages/<video>/00000.png ...
    <root>/Annotations/<video>/00000.png ...
    <root>/expressions.json
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

SHAPES = ("circle", "square", "triangle")
MOTIONS = ("left", "right", "up", "down", "bounce")

# name -> RGB in [0, 1]
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "cyan": (0.10, 0.85, 0.85),
    "magenta": (0.85, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.95, 0.95, 0.95),
}

BACKGROUND = (0.10, 0.10, 0.12)

# displacement per frame, in units of the per-object speed
_DIRECTIONS = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "up": (0.0, -1.0),
    "down": (0.0, 1.0),
}


class SceneError(ValueError):
    """Raised for scene specs that violate the scene contract."""


class DavisFormatError(ValueError):
    """Raised when an on-disk video directory is malformed or incomplete."""


@dataclass
class ObjectSpec:
    shape: str
    color: str
    motion: str
    size: float  # edge length / diameter in pixels
    x0: float
    y0: float
    speed: float
    # bounce direction; ignored for straight-line motions
    bounce_dir: tuple[float, float] = (1.0, 1.0)

    def attributes(self):
        return {"color": self.color, "shape": self.shape, "motion": self.motion}

    def triple(self):
        return (self.color, self.shape, self.motion)


@dataclass
class SceneSpec:
    seed: int
    num_frames: int
    height: int
    width: int
    objects: list[ObjectSpec]
    referent_index: int

    @property
    def referent(self) -> ObjectSpec:
        return self.objects[self.referent_index]


@dataclass
class RenderedSample:
    """One rendered clip with referent ground truth.

    frames:   (T, H, W, 3) float32 in [0, 1]
    gt_masks: (T, H, W) bool, referent only
    gt_boxes: (T, 4) float32 pixel xyxy (x2/y2 exclusive), zeros where invalid
    valid:    (T,) bool, True where the referent mask is non-empty
    """

    frames: np.ndarray
    gt_masks: np.ndarray
    gt_boxes: np.ndarray
    valid: np.ndarray
    expression: str
    video_id: str = "scene"
    referent: dict = field(default_factory=dict)


@dataclass
class SceneConfig:
    """Knobs for `sample_scene_spec`; sizes/speeds scale with resolution."""

    num_frames: int = 8
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 4
    size_frac: tuple[float, float] = (0.24, 0.36)
    speed_frac: tuple[float, float] = (0.015, 0.045)


def expression_for(obj: ObjectSpec) -> str:
    if obj.motion == "bounce":
        return f"the {obj.color} {obj.shape} bouncing around"
    return f"the {obj.color} {obj.shape} moving {obj.motion}"


def _fold(value: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Reflect a coordinate into [lo, hi] (triangle-wave bounce)."""
    span = hi - lo
    period = 2.0 * span
    x = np.mod(value - lo, period)
    return lo + np.where(x > span, period - x, x)


def object_positions(obj: ObjectSpec, num_frames: int, height: int, width: int) -> np.ndarray:
    """Center of `obj` in each frame, shape (T, 2) as (x, y)."""
    t = np.arange(num_frames, dtype=np.float64)
    margin = obj.size / 2.0 + 1.0
    if obj.motion == "bounce":
        dx, dy = obj.bounce_dir
        x = _fold(obj.x0 + obj.speed * dx * t, margin, width - margin)
        y = _fold(obj.y0 + obj.speed * dy * t, margin, height - margin)
    else:
        dx, dy = _DIRECTIONS[obj.motion]
        x = obj.x0 + obj.speed * dx * t
        y = obj.y0 + obj.speed * dy * t
    return np.stack([x, y], axis=1)


def rasterize_shape(shape: str, cx: float, cy: float, size: float, height: int, width: int) -> np.ndarray:
    """Boolean (H, W) mask of a single shape, evaluated at pixel centers."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    xx += 0.5
    yy += 0.5
    half = size / 2.0
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
    if shape == "square":
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= half
    if shape == "triangle":
        # upward triangle: apex (cx, cy-half), base corners (cx +- half, cy+half)
        ax, ay = cx, cy - half
        bx, by = cx - half, cy + half
        qx, qy = cx + half, cy + half

        def side(x1, y1, x2, y2):
            return (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)

        d1 = side(ax, ay, bx, by)
        d2 = side(bx, by, qx, qy)
        d3 = side(qx, qy, ax, ay)
        neg = (d1 <= 0) & (d2 <= 0) & (d3 <= 0)
        pos = (d1 >= 0) & (d2 >= 0) & (d3 >= 0)
        return neg | pos
    raise SceneError(f"unknown shape {shape!r}")


def mask_to_box(mask: np.ndarray) -> np.ndarray:
    """Tight pixel box [x1, y1, x2, y2] (exclusive max); zeros if empty."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return np.zeros(4, dtype=np.float32)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float32)


def validate_spec(spec: SceneSpec) -> None:
    n = len(spec.objects)
    if n < 2 or n > 6:
        raise SceneError(f"scene needs 2-6 objects, got {n}")
    if spec.num_frames < 2:
        raise SceneError(f"scene needs at least 2 frames, got {spec.num_frames}")
    if spec.height % 32 != 0 or spec.width % 32 != 0:
        raise SceneError(f"frame size must be divisible by 32, got {spec.height}x{spec.width}")
    if not (0 <= spec.referent_index < n):
        raise SceneError(f"referent index {spec.referent_index} out of range")
    ref = spec.referent
    triples = [o.triple() for i, o in enumerate(spec.objects) if i != spec.referent_index]
    if ref.triple() in triples:
        raise SceneError(f"referent triple {ref.triple()} is not unique in the scene")
    shares = any(
        o.color == ref.color or o.shape == ref.shape or o.motion == ref.motion for o in spec.objects
        if o is not ref
    )
    if not shares:
        raise SceneError("no distractor shares an attribute with the referent")
    # the referent must stay fully inside the frame so its mask is never clipped
    pos = object_positions(ref, spec.num_frames, spec.height, spec.width)
    half = ref.size / 2.0
    if (pos[:, 0] - half < 0).any() or (pos[:, 0] + half > spec.width).any():
        raise SceneError("referent leaves the frame horizontally")
    if (pos[:, 1] - half < 0).any() or (pos[:, 1] + half > spec.height).any():
        raise SceneError("referent leaves the frame vertically")


def _sample_object(rng: np.random.Generator, cfg: SceneConfig, attrs=None) -> ObjectSpec:
    base = min(cfg.height, cfg.width)
    if attrs is None:
        attrs = {
            "shape": rng.choice(SHAPES),
            "color": rng.choice(list(COLORS)),
            "motion": rng.choice(MOTIONS),
        }
    size = float(rng.uniform(*cfg.size_frac) * base)
    speed = float(rng.uniform(*cfg.speed_frac) * base)
    margin = size / 2.0 + 1.0
    travel = speed * (cfg.num_frames - 1)
    if attrs["motion"] in _DIRECTIONS:
        dx, dy = _DIRECTIONS[attrs["motion"]]
        # keep the whole trajectory inside the frame
        lo_x = margin + max(0.0, -dx * travel)
        hi_x = cfg.width - margin - max(0.0, dx * travel)
        lo_y = margin + max(0.0, -dy * travel)
        hi_y = cfg.height - margin - max(0.0, dy * travel)
        if lo_x >= hi_x or lo_y >= hi_y:
            speed = speed / 2.0
            travel = speed * (cfg.num_frames - 1)
            lo_x = margin + max(0.0, -dx * travel)
            hi_x = cfg.width - margin - max(0.0, dx * travel)
            lo_y = margin + max(0.0, -dy * travel)
            hi_y = cfg.height - margin - max(0.0, dy * travel)
        x0 = float(rng.uniform(lo_x, hi_x))
        y0 = float(rng.uniform(lo_y, hi_y))
        bounce = (1.0, 1.0)
    else:
        x0 = float(rng.uniform(margin, cfg.width - margin))
        y0 = float(rng.uniform(margin, cfg.height - margin))
        bounce = (float(rng.choice([-1.0, 1.0])), float(rng.choice([-1.0, 1.0])))
    return ObjectSpec(
        shape=str(attrs["shape"]),
        color=str(attrs["color"]),
        motion=str(attrs["motion"]),
        size=size,
        x0=x0,
        y0=y0,
        speed=speed,
        bounce_dir=bounce,
    )


def sample_scene_spec(seed: int, cfg: SceneConfig | None = None) -> SceneSpec:
    """Draw a valid scene spec; retries distractor attributes up to 100 times."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    num_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    referent = _sample_object(rng, cfg)

    for _ in range(100):
        distractors = []
        # the first distractor shares all but one attribute with the referent
        attrs = dict(referent.attributes())
        flip = rng.choice(["color", "shape", "motion"])
        pool = {"color": list(COLORS), "shape": SHAPES, "motion": MOTIONS}[flip]
        choices = [v for v in pool if v != attrs[flip]]
        attrs[flip] = str(rng.choice(choices))
        distractors.append(_sample_object(rng, cfg, attrs))
        for _ in range(num_objects - 2):
            distractors.append(_sample_object(rng, cfg))
        triples = {d.triple() for d in distractors}
        if referent.triple() not in triples:
            objects = distractors + [referent]
            spec = SceneSpec(
                seed=seed,
                num_frames=cfg.num_frames,
                height=cfg.height,
                width=cfg.width,
                objects=objects,
                referent_index=len(objects) - 1,
            )
            validate_spec(spec)
            return spec
    raise SceneError(f"could not sample a unique referent triple for seed {seed}")


def generate_scene(spec: SceneSpec) -> RenderedSample:
    """Render a spec to frames + referent ground truth.  Deterministic."""
    validate_spec(spec)
    T, H, W = spec.num_frames, spec.height, spec.width
    frames = np.empty((T, H, W, 3), dtype=np.float32)
    frames[:] = np.asarray(BACKGROUND, dtype=np.float32)
    gt_masks = np.zeros((T, H, W), dtype=bool)

    tracks = [object_positions(o, T, H, W) for o in spec.objects]
    # draw distractors first, referent last so it is never occluded
    order = [i for i in range(len(spec.objects)) if i != spec.referent_index]
    order.append(spec.referent_index)
    for t in range(T):
        for i in order:
            obj = spec.objects[i]
            cx, cy = tracks[i][t]
            mask = rasterize_shape(obj.shape, cx, cy, obj.size, H, W)
            frames[t][mask] = np.asarray(COLORS[obj.color], dtype=np.float32)
            if i == spec.referent_index:
                gt_masks[t] = mask

    valid = gt_masks.any(axis=(1, 2))
    gt_boxes = np.stack([mask_to_box(m) for m in gt_masks]).astype(np.float32)
    ref = spec.referent
    return RenderedSample(
        frames=frames,
        gt_masks=gt_masks,
        gt_boxes=gt_boxes,
        valid=valid,
        expression=expression_for(ref),
        video_id=f"scene_{spec.seed:06d}",
        referent=ref.attributes(),
    )


def generate_dataset(num_scenes: int, base_seed: int, cfg: SceneConfig | None = None) -> list[RenderedSample]:
    return [generate_scene(sample_scene_spec(base_seed + i, cfg)) for i in range(num_scenes)]


def perturb_brightness(frames: np.ndarray, factor: float) -> np.ndarray:
    """Scale frames by `factor` and clamp to [0, 1]."""
    if factor < 0:
        raise ValueError(f"brightness factor must be >= 0, got {factor}")
    return np.clip(frames * np.float32(factor), 0.0, 1.0).astype(np.float32)


def jitter_clip(frames: np.ndarray, rng: np.random.Generator, jitter: float) -> np.ndarray:
    """Per-frame brightness jitter in [1-jitter, 1+jitter]."""
    if jitter <= 0:
        return frames
    out = np.empty_like(frames)
    for t in range(frames.shape[0]):
        out[t] = perturb_brightness(frames[t], float(rng.uniform(1.0 - jitter, 1.0 + jitter)))
    return out


# ---------------------------------------------------------------------------
# DAVIS-style on-disk layout


def _expr_path(root) -> str:
    return os.path.join(root, "expressions.json")


def write_davis(root, video_id: str, sample: RenderedSample) -> None:
    img_dir = os.path.join(root, "JPEGImages", video_id)
    ann_dir = os.path.join(root, "Annotations", video_id)
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(ann_dir, exist_ok=True)
    for t in range(sample.frames.shape[0]):
        rgb = np.clip(np.rint(sample.frames[t] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(os.path.join(img_dir, f"{t:05d}.png"))
        m = (sample.gt_masks[t].astype(np.uint8)) * 255
        Image.fromarray(m, mode="L").save(os.path.join(ann_dir, f"{t:05d}.png"))
    expressions = {}
    if os.path.exists(_expr_path(root)):
        with open(_expr_path(root)) as f:
            expressions = json.load(f)
    expressions[video_id] = {"expression": sample.expression, "referent": dict(sample.referent)}
    with open(_expr_path(root), "w") as f:
        json.dump(expressions, f, indent=2, sort_keys=True)


def read_davis(root, video_id: str) -> RenderedSample:
    img_dir = os.path.join(root, "JPEGImages", video_id)
    ann_dir = os.path.join(root, "Annotations", video_id)
    if not os.path.isdir(img_dir):
        raise DavisFormatError(f"no frames directory for video {video_id!r} under {root}")
    if not os.path.isdir(ann_dir):
        raise DavisFormatError(f"no annotations directory for video {video_id!r} under {root}")
    frame_files = sorted(f for f in os.listdir(img_dir) if f.endswith(".png"))
    mask_files = sorted(f for f in os.listdir(ann_dir) if f.endswith(".png"))
    if not frame_files:
        raise DavisFormatError(f"video {video_id!r} has no frames")
    if len(frame_files) != len(mask_files):
        raise DavisFormatError(
            f"video {video_id!r} has {len(frame_files)} frames but {len(mask_files)} masks"
        )
    if not os.path.exists(_expr_path(root)):
        raise DavisFormatError(f"missing expressions.json under {root}")
    with open(_expr_path(root)) as f:
        expressions = json.load(f)
    if video_id not in expressions:
        raise DavisFormatError(f"video {video_id!r} missing from expressions.json")

    frames = []
    masks = []
    for ff, mf in zip(frame_files, mask_files):
        img = np.asarray(Image.open(os.path.join(img_dir, ff)).convert("RGB"), dtype=np.float32)
        frames.append(img / 255.0)
        m = np.asarray(Image.open(os.path.join(ann_dir, mf)).convert("L"))
        masks.append(m > 127)
    frames = np.stack(frames)
    gt_masks = np.stack(masks)
    gt_boxes = np.stack([mask_to_box(m) for m in gt_masks]).astype(np.float32)
    entry = expressions[video_id]
    return RenderedSample(
        frames=frames,
        gt_masks=gt_masks,
        gt_boxes=gt_boxes,
        valid=gt_masks.any(axis=(1, 2)),
        expression=entry["expression"],
        video_id=video_id,
        referent=dict(entry.get("referent", {})),
    )


def list_davis_videos(root) -> list[str]:
    img_root = os.path.join(root, "JPEGImages")
    if not os.path.isdir(img_root):
        return []
    return sorted(d for d in os.listdir(img_root) if os.path.isdir(os.path.join(img_root, d)))


def spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)
