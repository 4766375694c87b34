"""Procedural grayscale detection scenes.

Each scene holds a few shapes (square, disc, cross, ring, and optionally
triangle and frame) on a textured background.  Aleatoric knobs corrupt the
labels or pixels (box jitter, occlusion, pixel noise); epistemic knobs skew
which classes and sizes appear, so rare classes stay under-represented.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SHAPE_NAMES = ("square", "disc", "cross", "ring", "triangle", "frame")
MAX_CLASSES = len(SHAPE_NAMES)


@dataclass(frozen=True)
class BoundingBox:
    """Center/size box in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width/height must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x0, y0, x1, y1) -> "BoundingBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2.0, self.y - self.h / 2.0, self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])


@dataclass(frozen=True)
class ObjectMeta:
    true_box: BoundingBox
    occluded: bool = False


@dataclass
class Scene:
    id: int
    image: np.ndarray  # (H, W, 1) in [0, 1]
    objects: list  # [(class_id, BoundingBox)]
    meta: list = field(default_factory=list)  # [ObjectMeta], aligned with objects

    @property
    def classes(self) -> np.ndarray:
        return np.array([c for c, _ in self.objects], dtype=np.int64)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([b.as_array() for _, b in self.objects]).reshape(-1, 4)


@dataclass
class DatasetSpec:
    n_scenes: int = 100
    image_size: int = 64
    n_classes: int = 4
    objects_per_scene: tuple = (1, 4)
    size_range: tuple = (14, 28)
    box_jitter_sd: float = 0.0
    occlusion_prob: float = 0.0
    pixel_noise_sd: float = 0.02
    class_weights: tuple | None = None
    size_skew: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.objects_per_scene = tuple(int(v) for v in self.objects_per_scene)
        self.size_range = tuple(int(v) for v in self.size_range)
        if self.class_weights is not None:
            self.class_weights = tuple(float(v) for v in self.class_weights)

    def weights(self) -> np.ndarray:
        if self.class_weights is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        return np.asarray(self.class_weights, dtype=np.float64)

    def validate(self) -> None:
        lo_n, hi_n = self.objects_per_scene
        lo_s, hi_s = self.size_range
        if not 1 <= self.n_classes <= MAX_CLASSES:
            raise ValueError(f"n_classes must be in [1, {MAX_CLASSES}]")
        if self.n_scenes < 0 or lo_n < 0 or hi_n < lo_n:
            raise ValueError(f"bad objects_per_scene {self.objects_per_scene}")
        if not 4 <= lo_s <= hi_s:
            raise ValueError(f"bad size_range {self.size_range}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be in [0, 1]")
        if self.box_jitter_sd < 0 or self.pixel_noise_sd < 0 or self.size_skew < 0:
            raise ValueError("noise and skew knobs must be non-negative")
        w = self.weights()
        if len(w) != self.n_classes or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("class_weights must be n_classes non-negative values summing to 1")
        if hi_s > self.image_size:
            raise ValueError(f"objects up to {hi_s}px do not fit a {self.image_size}px image")
        # rejection placement needs head room: the largest scene at minimum size
        # may cover at most half the image
        if hi_n * lo_s * lo_s > 0.5 * self.image_size ** 2:
            raise ValueError(f"{hi_n} objects of >= {lo_s}px cannot be placed in a "
                             f"{self.image_size}px image")


def _shape_mask(cls_id: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (yy + 0.5 - h / 2.0) / (h / 2.0), (xx + 0.5 - w / 2.0) / (w / 2.0)
    r2 = cx * cx + cy * cy
    name = SHAPE_NAMES[cls_id - 1]
    if name == "square":
        m = np.ones((h, w), bool)
    elif name == "disc":
        m = r2 <= 1.0
    elif name == "cross":
        m = (np.abs(cx) <= 0.34) | (np.abs(cy) <= 0.34)
    elif name == "ring":
        m = (r2 <= 1.0) & (r2 >= 0.3)
    elif name == "triangle":
        # apex row spans the middle third so the mask touches all four box edges
        m = np.abs(cx) <= (cy + 1.0) / 2.0 + 1.0 / 3.0
    else:  # frame
        m = (np.abs(cx) >= 0.6) | (np.abs(cy) >= 0.6)
    return m


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg = np.full((size, size), 0.12)
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 4.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        bg += 0.03 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return bg


def _tight_box(mask: np.ndarray, x0: int, y0: int) -> BoundingBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox.from_corners(x0 + cols[0], y0 + rows[0], x0 + cols[-1] + 1, y0 + rows[-1] + 1)


def _overlaps(box, placed) -> bool:
    x0, y0, x1, y1 = box
    for a0, b0, a1, b1 in placed:
        if min(x1, a1) > max(x0, a0) and min(y1, b1) > max(y0, b0):
            return True
    return False


def render_scene(spec: DatasetSpec, scene_id: int) -> Scene:
    rng = np.random.default_rng([spec.seed, scene_id])
    S = spec.image_size
    img = _background(rng, S)
    weights = spec.weights()
    n_obj = int(rng.integers(spec.objects_per_scene[0], spec.objects_per_scene[1] + 1))
    lo, hi = spec.size_range
    expo = 1.0 + spec.size_skew
    objects, meta, placed = [], [], []
    tries = 0
    while len(objects) < n_obj and tries < 200:
        tries += 1
        cls_id = int(rng.choice(spec.n_classes, p=weights)) + 1
        base = lo + (hi - lo) * rng.random() ** expo
        aspect = np.exp(rng.uniform(-0.25, 0.25))
        w = int(np.clip(round(base * aspect), lo, hi))
        h = int(np.clip(round(base / aspect), lo, hi))
        x0 = int(rng.integers(0, S - w + 1))
        y0 = int(rng.integers(0, S - h + 1))
        corners = (x0, y0, x0 + w, y0 + h)
        if _overlaps(corners, placed):
            continue
        placed.append(corners)
        mask = _shape_mask(cls_id, h, w)
        true_box = _tight_box(mask, x0, y0)
        intensity = rng.uniform(0.6, 1.0)
        region = img[y0:y0 + h, x0:x0 + w]
        region[mask] = intensity

        occluded = bool(rng.random() < spec.occlusion_prob)
        if occluded:
            # cover 25-50% of the box from one side with background tone
            frac = rng.uniform(0.25, 0.5)
            side = int(rng.integers(4))
            if side == 0:
                region[:, :max(1, int(w * frac))] = 0.12
            elif side == 1:
                region[:, w - max(1, int(w * frac)):] = 0.12
            elif side == 2:
                region[:max(1, int(h * frac)), :] = 0.12
            else:
                region[h - max(1, int(h * frac)):, :] = 0.12

        gt = true_box
        if spec.box_jitter_sd > 0:
            dx, dy, dw, dh = rng.normal(0.0, spec.box_jitter_sd, 4)
            gx0, gy0, gx1, gy1 = true_box.corners()
            gx0, gx1 = gx0 + dx - dw / 2, gx1 + dx + dw / 2
            gy0, gy1 = gy0 + dy - dh / 2, gy1 + dy + dh / 2
            gx0, gy0 = max(0.0, gx0), max(0.0, gy0)
            gx1, gy1 = min(float(S), gx1), min(float(S), gy1)
            if gx1 - gx0 >= 2 and gy1 - gy0 >= 2:
                gt = BoundingBox.from_corners(gx0, gy0, gx1, gy1)
        objects.append((cls_id, gt))
        meta.append(ObjectMeta(true_box, occluded))

    if spec.pixel_noise_sd > 0:
        img = img + rng.normal(0.0, spec.pixel_noise_sd, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Scene(scene_id, img[:, :, None], objects, meta)


def generate_dataset(spec: DatasetSpec) -> list[Scene]:
    """Render ``spec.n_scenes`` scenes; a pure function of ``spec``."""
    spec.validate()
    return [render_scene(spec, i) for i in range(spec.n_scenes)]


def split(dataset: list, fractions, seed: int) -> tuple[list, list]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be two non-negative values summing to 1, got {fractions}")
    n = len(dataset)
    n_train = int(round(n * fractions[0]))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} scenes by {fractions} leaves an empty partition")
    order = np.random.default_rng(seed).permutation(n)
    train = sorted((dataset[i] for i in order[:n_train]), key=lambda s: s.id)
    test = sorted((dataset[i] for i in order[n_train:]), key=lambda s: s.id)
    return train, test


# ---------------------------------------------------------------- persistence

SCENE_MAGIC = b"SCN1"
MANIFEST_VERSION = 1


def encode_scene(scene: Scene) -> bytes:
    """Binary scene record, little-endian.

    ``SCN1`` | u32 id | u32 H | u32 W | u32 n_objects | H*W float64 pixels (row-major)
    | per object: i32 class, 4 x f64 GT box (x, y, w, h), 4 x f64 rendered box, u8 occluded.
    """
    H, W = scene.image.shape[:2]
    out = [SCENE_MAGIC, struct.pack("<IIII", scene.id, H, W, len(scene.objects)),
           np.ascontiguousarray(scene.image[:, :, 0], dtype="<f8").tobytes()]
    for (c, b), m in zip(scene.objects, scene.meta):
        out.append(struct.pack("<i4d4dB", c, b.x, b.y, b.w, b.h,
                               m.true_box.x, m.true_box.y, m.true_box.w, m.true_box.h, int(m.occluded)))
    return b"".join(out)


def decode_scene(buf: bytes) -> Scene:
    if buf[:4] != SCENE_MAGIC:
        raise ValueError("not a scene record")
    sid, H, W, n = struct.unpack_from("<IIII", buf, 4)
    pos = 20
    img = np.frombuffer(buf, dtype="<f8", count=H * W, offset=pos).reshape(H, W, 1).astype(np.float64)
    pos += 8 * H * W
    rec = struct.Struct("<i4d4dB")
    objects, meta = [], []
    for _ in range(n):
        c, x, y, w, h, tx, ty, tw, th, occ = rec.unpack_from(buf, pos)
        pos += rec.size
        objects.append((c, BoundingBox(x, y, w, h)))
        meta.append(ObjectMeta(BoundingBox(tx, ty, tw, th), bool(occ)))
    return Scene(sid, img, objects, meta)


def save_dataset(directory, spec: DatasetSpec, scenes: list) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = []
    for s in scenes:
        name = f"scene_{s.id:06d}.bin"
        (d / name).write_bytes(encode_scene(s))
        index.append({"id": s.id, "file": name, "n_objects": len(s.objects)})
    manifest = {"format_version": MANIFEST_VERSION, "spec": asdict(spec), "scenes": index}
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(directory) -> tuple[DatasetSpec, list[Scene]]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('format_version')}")
    spec = DatasetSpec(**manifest["spec"])
    scenes = [decode_scene((d / e["file"]).read_bytes()) for e in manifest["scenes"]]
    return spec, scenes
