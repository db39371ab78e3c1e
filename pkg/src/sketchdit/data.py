"""Synthetic moving-shapes corpus.

Scenes are one or two flat-colored shapes (square, circle, triangle) moving
linearly over a dark background, rendered with a signed-distance function and
a one-pixel anti-aliasing band. Prompts follow the fixed clause grammar
"<color> <kind> <motion>" and are derived from the scene spec, never stored
authoritative on their own. Sketches are Sobel edge maps thresholded at a
quarter of the per-frame maximum.

Everything is deterministic from a seed: the same seed regenerates the same
corpus byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import codec
from .editing import MaskSpec
from .text import COLORS, KINDS

DEFAULT_T = 17
DEFAULT_SIZE = 32

COLOR_VALUES = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.25),
    "blue": (0.20, 0.35, 0.90),
    "yellow": (0.95, 0.85, 0.20),
    "cyan": (0.15, 0.80, 0.85),
    "magenta": (0.85, 0.20, 0.80),
    "orange": (0.95, 0.55, 0.15),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
}

MOTIONS = {
    "still": (0.0, 0.0),
    "moves left": (-1.0, 0.0),
    "moves right": (1.0, 0.0),
    "moves up": (0.0, -1.0),
    "moves down": (0.0, 1.0),
}
SPEEDS = (0.5, 0.75, 1.0)


@dataclass(frozen=True)
class ShapeSpec:
    kind: str  # square | circle | triangle
    color: str
    size: float  # full extent in pixels
    start: tuple[float, float]  # (x, y) center at frame 0
    velocity: tuple[float, float]  # pixels per frame

    @property
    def motion_phrase(self) -> str:
        vx, vy = self.velocity
        if vx == vy == 0:
            return "still"
        if abs(vx) >= abs(vy):
            return "moves right" if vx > 0 else "moves left"
        return "moves down" if vy > 0 else "moves up"

    def center(self, t: float) -> tuple[float, float]:
        return (self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t)


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple[ShapeSpec, ...]
    background: str = "black"
    t_total: int = DEFAULT_T
    height: int = DEFAULT_SIZE
    width: int = DEFAULT_SIZE

    @property
    def prompt(self) -> str:
        return ", ".join(f"{s.color} {s.kind} {s.motion_phrase}" for s in self.shapes)

    def to_dict(self) -> dict:
        return {
            "shapes": [
                {
                    "kind": s.kind,
                    "color": s.color,
                    "size": s.size,
                    "start": list(s.start),
                    "velocity": list(s.velocity),
                }
                for s in self.shapes
            ],
            "background": self.background,
            "t_total": self.t_total,
            "height": self.height,
            "width": self.width,
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        return SceneSpec(
            shapes=tuple(
                ShapeSpec(
                    kind=s["kind"],
                    color=s["color"],
                    size=float(s["size"]),
                    start=tuple(s["start"]),
                    velocity=tuple(s["velocity"]),
                )
                for s in d["shapes"]
            ),
            background=d.get("background", "black"),
            t_total=int(d["t_total"]),
            height=int(d["height"]),
            width=int(d["width"]),
        )


def _shape_sdf(shape: ShapeSpec, t: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    cx, cy = shape.center(t)
    half = shape.size / 2.0
    dx, dy = xs - cx, ys - cy
    if shape.kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - half
    if shape.kind == "circle":
        return np.hypot(dx, dy) - half
    if shape.kind == "triangle":
        verts = np.array(
            [[cx, cy - half], [cx + half, cy + half], [cx - half, cy + half]], dtype=np.float64
        )
        centroid = verts.mean(axis=0)
        sd = np.full(xs.shape, -np.inf)
        for a, b in zip(verts, np.roll(verts, -1, axis=0)):
            n = np.array([b[1] - a[1], a[0] - b[0]])
            n /= np.hypot(*n)
            if n @ (centroid - a) > 0:
                n = -n
            sd = np.maximum(sd, (xs - a[0]) * n[0] + (ys - a[1]) * n[1])
        return sd
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render_frame(spec: SceneSpec, t: float) -> np.ndarray:
    """One frame [H, W, 3] float32 in [0, 1]; shapes painted in list order."""
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    frame = np.empty((spec.height, spec.width, 3), dtype=np.float64)
    frame[:] = COLOR_VALUES[spec.background]
    for shape in spec.shapes:
        cov = np.clip(0.5 - _shape_sdf(shape, t, xs, ys), 0.0, 1.0)[..., None]
        frame = frame * (1 - cov) + np.array(COLOR_VALUES[shape.color]) * cov
    return frame.astype(np.float32)


def render_scene(spec: SceneSpec) -> np.ndarray:
    return np.stack([render_frame(spec, t) for t in range(spec.t_total)])


def sample_scene_spec(
    rng: np.random.Generator,
    n_shapes: int | None = None,
    t_total: int = DEFAULT_T,
    height: int = DEFAULT_SIZE,
    width: int = DEFAULT_SIZE,
) -> SceneSpec:
    """Random scene whose shapes stay fully in frame over the whole clip."""
    if n_shapes is None:
        n_shapes = int(rng.integers(1, 3))
    colors = rng.choice(len(COLORS), size=n_shapes, replace=False)
    scale = min(height, width) / 32.0  # shape and speed ranges are tuned for 32px frames
    shapes = []
    for ci in colors:
        kind = KINDS[rng.integers(len(KINDS))]
        size = max(4.0, float(rng.uniform(7.0, 12.0)) * scale)
        phrase = list(MOTIONS)[rng.integers(len(MOTIONS))]
        vx, vy = MOTIONS[phrase]
        if phrase != "still":
            speed = SPEEDS[rng.integers(len(SPEEDS))] * scale
            vx, vy = vx * speed, vy * speed
        margin = size / 2 + 1.0
        span = t_total - 1
        lo_x = margin - min(vx * span, 0.0)
        hi_x = width - margin - max(vx * span, 0.0)
        lo_y = margin - min(vy * span, 0.0)
        hi_y = height - margin - max(vy * span, 0.0)
        if hi_x < lo_x or hi_y < lo_y:  # frame too small for this motion
            vx = vy = 0.0
            lo_x, hi_x = margin, width - margin
            lo_y, hi_y = margin, height - margin
        for _ in range(20):
            start = (float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y)))
            if all(
                abs(start[0] - s.start[0]) + abs(start[1] - s.start[1]) > (size + s.size) / 2
                for s in shapes
            ):
                break
        shapes.append(
            ShapeSpec(kind=kind, color=COLORS[ci], size=size, start=start, velocity=(vx, vy))
        )
    return SceneSpec(
        tuple(shapes), background="black", t_total=t_total, height=height, width=width
    )


def generate_scene(seed: int) -> tuple[np.ndarray, SceneSpec]:
    spec = sample_scene_spec(np.random.default_rng(seed))
    return render_scene(spec), spec


def extract_sketch(frame: np.ndarray) -> np.ndarray:
    """Binary edge map: Sobel gradient magnitude of luminance above 0.25*max."""
    lum = frame @ np.array([0.299, 0.587, 0.114])
    gy = ndimage.sobel(lum, axis=0, mode="reflect")
    gx = ndimage.sobel(lum, axis=1, mode="reflect")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak == 0:
        return np.zeros(lum.shape, dtype=np.uint8)
    return (mag >= 0.25 * peak).astype(np.uint8)


def sample_keyframes(t_total: int, k: int, rng: np.random.Generator) -> list[int]:
    """k in {1, 2} keyframe times, sorted; restricted to distinct latent frames.

    Times are drawn by latent group first so two keyframes never collapse onto
    the same latent row, then uniformly within the chosen group's pixel frames.
    """
    groups = codec.latent_frames(t_total)
    if not 1 <= k <= 2:
        raise ValueError(f"k must be 1 or 2, got {k}")
    if k > groups:
        raise ValueError(f"cannot draw {k} keyframes from {groups} latent frames")
    chosen = rng.choice(groups, size=k, replace=False)
    times = []
    for g in sorted(int(g) for g in chosen):
        frames = codec.group_pixel_frames(g, t_total)
        times.append(int(frames[rng.integers(len(frames))]))
    return times


MOVEMENTS_CYCLE = ("fixed", "linear", "flow")


def sample_edit_mask(rng: np.random.Generator, spec: SceneSpec) -> MaskSpec:
    """Random rectangle covering 4-50% of the frame, movement uniform over the
    three strategies."""
    h_img, w_img = spec.height, spec.width
    area = h_img * w_img
    while True:
        frac = rng.uniform(0.04, 0.5)
        ratio = rng.uniform(0.5, 2.0)
        w = int(round(np.sqrt(frac * area * ratio)))
        h = int(round(np.sqrt(frac * area / ratio)))
        w, h = min(max(w, 2), w_img), min(max(h, 2), h_img)
        if 0.04 <= w * h / area <= 0.5:
            break
    x = int(rng.integers(0, w_img - w + 1))
    y = int(rng.integers(0, h_img - h + 1))
    movement = MOVEMENTS_CYCLE[rng.integers(3)]
    endpoint = None
    if movement == "linear":
        endpoint = (int(rng.integers(0, w_img - w + 1)), int(rng.integers(0, h_img - h + 1)), w, h)
    return MaskSpec(rect=(x, y, w, h), movement=movement, endpoint=endpoint,
                    frames=(0, spec.t_total))


def ground_truth_velocity(spec: SceneSpec):
    """Velocity provider for flow-driven masks: the overlap-area-weighted mean
    of the scene's declared shape velocities inside the rectangle."""

    def velocity(t: int, rect: tuple[int, int, int, int]) -> tuple[float, float]:
        x, y, w, h = rect
        total, vx, vy = 0.0, 0.0, 0.0
        for s in spec.shapes:
            cx, cy = s.center(t)
            half = s.size / 2
            ox = max(0.0, min(x + w, cx + half) - max(x, cx - half))
            oy = max(0.0, min(y + h, cy + half) - max(y, cy - half))
            weight = ox * oy
            total += weight
            vx += weight * s.velocity[0]
            vy += weight * s.velocity[1]
        if total == 0:
            return (0.0, 0.0)
        return (vx / total, vy / total)

    return velocity


@dataclass
class TrainingSample:
    kind: str  # "image" | "video"
    clip: np.ndarray  # [T, H, W, 3] float32; T = 1 for images
    prompt: str
    keyframe_times: list[int]  # positions on the declared timeline
    sketches: list[np.ndarray]  # binary [H, W], one per keyframe
    timeline_frames: int = DEFAULT_T
    mask_spec: MaskSpec | None = None
    scene: SceneSpec | None = None

    def __post_init__(self):
        want = 1 if self.kind == "image" else self.timeline_frames
        if self.clip.shape[0] != want:
            raise ValueError(f"{self.kind} sample must have {want} frames, got {self.clip.shape[0]}")

    @property
    def declared_time(self) -> int:
        """Timeline position of an image sample (its only keyframe's time)."""
        return self.keyframe_times[0]


def _sample_rng(seed: int, kind: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, {"video": 0, "image": 1}[kind], index]))


def make_video_sample(
    rng: np.random.Generator, with_mask: bool = False, t_total: int = DEFAULT_T,
    height: int = DEFAULT_SIZE, width: int = DEFAULT_SIZE,
) -> TrainingSample:
    spec = sample_scene_spec(rng, t_total=t_total, height=height, width=width)
    clip = render_scene(spec)
    times = sample_keyframes(t_total, int(rng.integers(1, 3)), rng)
    sketches = [extract_sketch(clip[t]) for t in times]
    mask = sample_edit_mask(rng, spec) if with_mask else None
    return TrainingSample(
        kind="video", clip=clip, prompt=spec.prompt, keyframe_times=times,
        sketches=sketches, timeline_frames=t_total, mask_spec=mask, scene=spec,
    )


def make_image_sample(
    rng: np.random.Generator, t_total: int = DEFAULT_T,
    height: int = DEFAULT_SIZE, width: int = DEFAULT_SIZE,
) -> TrainingSample:
    """Single frame declared at a random timeline position so image batches
    exercise every temporal embedding, not just frame zero."""
    spec = sample_scene_spec(rng, t_total=t_total, height=height, width=width)
    declared = int(rng.integers(0, t_total))
    frame = render_frame(spec, declared)
    return TrainingSample(
        kind="image", clip=frame[None], prompt=spec.prompt, keyframe_times=[declared],
        sketches=[extract_sketch(frame)], timeline_frames=t_total, scene=spec,
    )


class SyntheticCorpus:
    """Deterministic, lazily rendered corpus; index i always maps to the same
    sample regardless of access order."""

    def __init__(
        self, n_video: int = 2000, n_image: int = 4000, seed: int = 0,
        with_masks: bool = False, t_total: int = DEFAULT_T,
        height: int = DEFAULT_SIZE, width: int = DEFAULT_SIZE, cache: bool = True,
    ):
        self.n_video, self.n_image, self.seed = n_video, n_image, seed
        self.with_masks = with_masks
        self.t_total, self.height, self.width = t_total, height, width
        self._cache: dict[int, TrainingSample] | None = {} if cache else None

    def __len__(self) -> int:
        return self.n_video + self.n_image

    def kind_of(self, i: int) -> str:
        return "video" if i < self.n_video else "image"

    def indices_of(self, kind: str) -> list[int]:
        if kind == "video":
            return list(range(self.n_video))
        return list(range(self.n_video, len(self)))

    def __getitem__(self, i: int) -> TrainingSample:
        if not 0 <= i < len(self):
            raise IndexError(i)
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        dims = dict(t_total=self.t_total, height=self.height, width=self.width)
        if i < self.n_video:
            rng = _sample_rng(self.seed, "video", i)
            sample = make_video_sample(rng, with_mask=self.with_masks, **dims)
        else:
            rng = _sample_rng(self.seed, "image", i - self.n_video)
            sample = make_image_sample(rng, **dims)
        if self._cache is not None:
            self._cache[i] = sample
        return sample


class Loader:
    """Epoch-shuffled batches of one sample kind; identical order under equal
    seeds. Iterating past an epoch boundary reshuffles with the next epoch key."""

    def __init__(self, corpus, kind: str, batch_size: int, seed: int = 0):
        self.corpus = corpus
        self.indices = corpus.indices_of(kind)
        if not self.indices:
            raise ValueError(f"corpus has no {kind!r} samples")
        self.batch_size = batch_size
        self.seed = seed
        self._epoch = 0
        self._pos = 0
        self._order = self._shuffled()

    def _shuffled(self) -> list[int]:
        order = list(self.indices)
        np.random.default_rng(np.random.SeedSequence([self.seed, self._epoch])).shuffle(order)
        return order

    def next_batch(self) -> list[TrainingSample]:
        out = []
        while len(out) < self.batch_size:
            if self._pos >= len(self._order):
                self._epoch += 1
                self._pos = 0
                self._order = self._shuffled()
            out.append(self.corpus[self._order[self._pos]])
            self._pos += 1
        return out


def _to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255).astype(np.uint8)


def write_corpus(
    root: str | Path, corpus: SyntheticCorpus, limit: int | None = None
) -> Path:
    """Materialize a corpus as PNG frame directories + JSON metadata.

    Layout: root/{index.json, samples/<id>/{frames/%05d.png, sketch_<k>.png,
    scene.json}}. PNG is lossless over the uint8 quantization, so read-back
    reproduces the stored pixels exactly.
    """
    from PIL import Image

    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    count = len(corpus) if limit is None else min(limit, len(corpus))
    entries = []
    for i in range(count):
        sample = corpus[i]
        sid = f"{sample.kind[:3]}_{i:05d}"
        sdir = root / "samples" / sid
        (sdir / "frames").mkdir(parents=True, exist_ok=True)
        for t in range(sample.clip.shape[0]):
            Image.fromarray(_to_uint8(sample.clip[t])).save(sdir / "frames" / f"{t:05d}.png")
        for k, sketch in enumerate(sample.sketches):
            Image.fromarray(sketch * np.uint8(255)).save(sdir / f"sketch_{k}.png")
        meta = {
            "kind": sample.kind,
            "prompt": sample.prompt,
            "keyframe_times": sample.keyframe_times,
            "timeline_frames": sample.timeline_frames,
            "scene": sample.scene.to_dict() if sample.scene else None,
            "mask": sample.mask_spec.to_dict() if sample.mask_spec else None,
        }
        (sdir / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        entries.append({"id": sid, "kind": sample.kind})
    index = {"version": 1, "seed": corpus.seed, "count": count, "samples": entries}
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return root


class DiskCorpus:
    """Reads a corpus written by write_corpus; same interface as SyntheticCorpus."""

    def __init__(self, root: str | Path, cache: bool = True):
        self.root = Path(root)
        index_path = self.root / "index.json"
        if not index_path.exists():
            raise FileNotFoundError(f"no index.json under {self.root}")
        index = json.loads(index_path.read_text())
        if "samples" not in index or "count" not in index:
            raise ValueError(f"corrupt index at {index_path}: missing keys")
        if len(index["samples"]) != index["count"]:
            raise ValueError(
                f"corrupt index at {index_path}: lists {len(index['samples'])} samples, "
                f"declares {index['count']}"
            )
        self.entries = index["samples"]
        self.seed = index.get("seed")
        self._cache: dict[int, TrainingSample] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.entries)

    def kind_of(self, i: int) -> str:
        return self.entries[i]["kind"]

    def indices_of(self, kind: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e["kind"] == kind]

    def __getitem__(self, i: int) -> TrainingSample:
        from PIL import Image

        if self._cache is not None and i in self._cache:
            return self._cache[i]
        sdir = self.root / "samples" / self.entries[i]["id"]
        meta = json.loads((sdir / "scene.json").read_text())
        frame_paths = sorted((sdir / "frames").glob("*.png"))
        want = 1 if meta["kind"] == "image" else meta["timeline_frames"]
        if len(frame_paths) != want:
            raise FileNotFoundError(
                f"{sdir}: expected {want} frames, found {len(frame_paths)}"
            )
        clip = np.stack(
            [np.asarray(Image.open(p), dtype=np.float32) / 255.0 for p in frame_paths]
        )
        sketches = [
            (np.asarray(Image.open(p)) > 0).astype(np.uint8)
            for p in sorted(sdir.glob("sketch_*.png"))
        ]
        sample = TrainingSample(
            kind=meta["kind"],
            clip=clip,
            prompt=meta["prompt"],
            keyframe_times=list(meta["keyframe_times"]),
            sketches=sketches,
            timeline_frames=meta["timeline_frames"],
            mask_spec=MaskSpec.from_dict(meta["mask"]) if meta.get("mask") else None,
            scene=SceneSpec.from_dict(meta["scene"]) if meta.get("scene") else None,
        )
        if self._cache is not None:
            self._cache[i] = sample
        return sample
