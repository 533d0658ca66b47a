"""Procedural car-like scenes with labeled keypoints, wheel distractors and occluders.

Object frame: u points to the front of the object, v points down, both in
units of the object's half-width.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataIOError, GenerationError
from .sampler import KeypointAnnotation

SCHEMA_VERSION = 1

OCCLUSION_BANDS = {1: (0.2, 0.4), 2: (0.4, 0.6), 3: (0.6, 0.8)}

KEYPOINT_NAMES = (
    "wheel_front", "wheel_back", "light_front", "light_back",
    "roof_front", "roof_back", "bumper_front", "bumper_back",
)
TEMPLATE_KEYPOINTS = np.array([
    (0.55, 0.35), (-0.55, 0.35), (0.92, -0.02), (-0.92, -0.02),
    (0.26, -0.44), (-0.40, -0.44), (0.93, 0.28), (-0.93, 0.28),
])
BODY = ((-1.0, -0.1), (1.0, 0.35))  # lower body box, (u0, v0), (u1, v1)
CABIN = np.array([(-0.65, -0.1), (0.6, -0.1), (0.3, -0.5), (-0.45, -0.5)])
WINDOW = np.array([(-0.52, -0.14), (0.47, -0.14), (0.24, -0.42), (-0.38, -0.42)])
WHEEL_RADIUS = 0.22
HUB_RADIUS = 0.1
LIGHT_FRONT = ((0.84, -0.08), (1.0, 0.05))
LIGHT_BACK = ((-1.0, -0.08), (-0.84, 0.05))

TIRE_COLOR = np.array([0.08, 0.08, 0.1])
HUB_COLOR = np.array([0.75, 0.75, 0.72])


@dataclass
class GeneratorConfig:
    image_size: int = 64
    num_keypoints: int = 8
    half_width: tuple = (17.0, 23.0)  # pixels
    rotation_deg: float = 15.0
    distractors: tuple = (1, 2)  # inclusive range of wheel-like distractors
    background_shapes: tuple = (2, 5)
    noise_std: float = 0.02
    seed: int = 1
    max_tries: int = 50

    def __post_init__(self):
        self.half_width = tuple(self.half_width)
        self.distractors = tuple(self.distractors)
        self.background_shapes = tuple(self.background_shapes)
        if self.num_keypoints != len(TEMPLATE_KEYPOINTS):
            raise GenerationError(f"template has {len(TEMPLATE_KEYPOINTS)} keypoints, got {self.num_keypoints}")


@dataclass
class Scene:
    scene_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], multiples of 1/255
    annotations: list
    bbox: tuple  # (h, w, x0, y0)
    mask: np.ndarray | None = None  # object mask, (H, W) bool
    level: int = 0
    occluded_fraction: float = 0.0
    distractor_centers: list = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _in_polygon(u, v, poly) -> np.ndarray:
    """Convex polygon test (vertices in either winding)."""
    inside_pos = np.ones(u.shape, bool)
    inside_neg = np.ones(u.shape, bool)
    for (x0, y0), (x1, y1) in zip(poly, np.roll(poly, -1, axis=0)):
        cross = (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0)
        inside_pos &= cross >= 0
        inside_neg &= cross <= 0
    return inside_pos | inside_neg


def _in_box(u, v, box) -> np.ndarray:
    (u0, v0), (u1, v1) = box
    return (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)


def _background(rng, size: int, n_shapes: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.85, size=(4, 4, 3))
    img = ndimage.zoom(coarse, (size / 4, size / 4, 1), order=1, mode="nearest")[:size, :size]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(n_shapes):
        color = rng.uniform(0.1, 0.9, 3)
        cx, cy = rng.uniform(0, size, 2)
        if rng.random() < 0.5:
            rx, ry = rng.uniform(3, 10, 2)
            m = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
        else:
            hw, hh = rng.uniform(2, 9, 2)
            m = (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
        img[m] = color
    return img


def _draw_wheel(img, xx, yy, cx, cy, radius):
    r2 = (xx - cx) ** 2 + (yy - cy) ** 2
    img[r2 <= radius**2] = TIRE_COLOR
    img[r2 <= (radius * HUB_RADIUS / WHEEL_RADIUS) ** 2] = HUB_COLOR
    return r2 <= radius**2


def generate_scene(config: GeneratorConfig, index: int, split: str = "s") -> Scene:
    """Render one unoccluded scene; fully determined by ``(config.seed, index)``."""
    rng = np.random.default_rng([config.seed, index])
    size = config.image_size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(config.max_tries):
        half = rng.uniform(*config.half_width)
        angle = math.radians(rng.uniform(-config.rotation_deg, config.rotation_deg))
        cx, cy = rng.uniform(0.2 * size, 0.8 * size, 2)
        cos, sin = math.cos(angle), math.sin(angle)
        # pixel -> object frame
        dx, dy = xx - cx, yy - cy
        u = (cos * dx + sin * dy) / half
        v = (-sin * dx + cos * dy) / half
        wheel_centers = [(0.55, 0.35), (-0.55, 0.35)]
        body = _in_box(u, v, BODY) | _in_polygon(u, v, CABIN)
        wheels = np.zeros_like(body)
        for wu, wv in wheel_centers:
            wheels |= (u - wu) ** 2 + (v - wv) ** 2 <= WHEEL_RADIUS**2
        mask = body | wheels
        kp = np.array([(cx + half * (cos * a - sin * b), cy + half * (sin * a + cos * b)) for a, b in TEMPLATE_KEYPOINTS])
        ys, xs = np.nonzero(mask)
        if len(xs) == 0 or xs.min() < 1 or ys.min() < 1 or xs.max() > size - 2 or ys.max() > size - 2:
            continue
        if not np.all((kp >= 0) & (kp < size)):
            continue
        break
    else:
        raise GenerationError(f"could not place object inside the frame after {config.max_tries} tries (index {index})")

    img = _background(rng, size, int(rng.integers(config.background_shapes[0], config.background_shapes[1] + 1)))

    # wheel-like distractors off the object, same radius and sub-pixel phase as the wheels
    wheel_px = [(cx + half * (cos * a - sin * b), cy + half * (sin * a + cos * b)) for a, b in wheel_centers]
    radius_px = WHEEL_RADIUS * half
    keepout = ndimage.binary_dilation(mask, iterations=int(math.ceil(radius_px)) + 2)
    distractors = []
    n_distractors = int(rng.integers(config.distractors[0], config.distractors[1] + 1))
    for _ in range(200):
        if len(distractors) >= n_distractors:
            break
        ref = wheel_px[int(rng.integers(2))]
        ox, oy = rng.integers(-size, size, 2)
        dcx, dcy = ref[0] + ox, ref[1] + oy
        if not (radius_px + 1 <= dcx <= size - radius_px - 1 and radius_px + 1 <= dcy <= size - radius_px - 1):
            continue
        disk = (xx - dcx) ** 2 + (yy - dcy) ** 2 <= (radius_px + 1) ** 2
        if (disk & keepout).any() or any((dcx - px) ** 2 + (dcy - py) ** 2 < (2 * radius_px + 2) ** 2 for px, py in distractors):
            continue
        distractors.append((float(dcx), float(dcy)))
    for dcx, dcy in distractors:
        _draw_wheel(img, xx, yy, dcx, dcy, radius_px)

    body_color = rng.uniform(0.2, 0.95, 3)
    img[body] = body_color
    img[_in_polygon(u, v, WINDOW)] = np.array([0.55, 0.7, 0.85]) * rng.uniform(0.8, 1.0)
    img[_in_box(u, v, LIGHT_FRONT)] = (1.0, 0.9, 0.2)
    img[_in_box(u, v, LIGHT_BACK)] = (0.85, 0.1, 0.1)
    for wx, wy in wheel_px:
        _draw_wheel(img, xx, yy, wx, wy, radius_px)

    img = _quantize(img + rng.normal(0.0, config.noise_std, img.shape))
    ys, xs = np.nonzero(mask)
    x0, y0 = int(xs.min()), int(ys.min())
    bbox = (int(ys.max()) - y0 + 1, int(xs.max()) - x0 + 1, x0, y0)
    annotations = [KeypointAnnotation(k, float(x), float(y), True) for k, (x, y) in enumerate(kp)]
    return Scene(f"{split}_{index:05d}", img, annotations, bbox, mask, 0, 0.0, distractors)


def _occluder_texture(rng, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.05, 0.95, 3)
    yy, xx = np.mgrid[0:h, 0:w]
    period = rng.uniform(2.0, 6.0)
    theta = rng.uniform(0, math.pi)
    stripes = np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period)
    tex = base + 0.15 * stripes[..., None] + rng.normal(0, 0.05, (h, w, 3))
    return tex


def apply_occlusion(scene: Scene, level: int, rng: np.random.Generator, max_patches: int = 40,
                    max_attempts: int = 400) -> Scene:
    """Cover a fraction of the object mask inside the level's band with textured rectangles.

    Level 0 returns an unchanged copy. Covered keypoints become invisible;
    their coordinates are kept.
    """
    if level == 0 or max_patches == 0:
        return replace(scene, image=scene.image.copy(), annotations=list(scene.annotations))
    if level not in OCCLUSION_BANDS:
        raise GenerationError(f"occlusion level must be 0..3, got {level}")
    if scene.mask is None:
        raise GenerationError("scene has no object mask; cannot measure occlusion")
    lo, hi = OCCLUSION_BANDS[level]
    target = rng.uniform(lo + 0.02, hi - 0.02)
    h, w, x0, y0 = scene.bbox
    mask = scene.mask
    area = mask.sum()
    covered = np.zeros_like(mask)
    img = scene.image.astype(np.float64)
    patches = 0
    frac = 0.0
    for _ in range(max_attempts):
        if frac >= target or patches >= max_patches:
            break
        # patch size shrinks as the target gets close
        need = target - frac
        scale = math.sqrt(max(need, 0.02) * rng.uniform(0.6, 1.6))
        ph = int(np.clip(round(h * scale * rng.uniform(0.6, 1.4)), 2, h))
        pw = int(np.clip(round(w * scale * rng.uniform(0.6, 1.4)), 2, w))
        py = y0 + int(rng.integers(0, h - ph + 1))
        px = x0 + int(rng.integers(0, w - pw + 1))
        trial = covered.copy()
        trial[py:py + ph, px:px + pw] = True
        new_frac = (trial & mask).sum() / area
        if new_frac > hi - 0.005 or new_frac <= frac:
            continue
        covered = trial
        frac = new_frac
        img[py:py + ph, px:px + pw] = _occluder_texture(rng, ph, pw)
        patches += 1
    if not lo <= frac <= hi:
        raise GenerationError(f"{scene.scene_id}: occlusion {frac:.3f} outside level {level} band [{lo}, {hi}]")
    annotations = []
    for a in scene.annotations:
        col, row = int(math.floor(a.x)), int(math.floor(a.y))
        hidden = covered[row, col]
        annotations.append(KeypointAnnotation(a.keypoint_id, a.x, a.y, a.visible and not hidden))
    return replace(scene, image=_quantize(img), annotations=annotations, level=level,
                   occluded_fraction=float(frac))


def wheel_patch_correlation(scene: Scene, distractor: int = 0) -> float:
    """Max grayscale correlation between a distractor patch and either wheel patch."""
    gray = scene.image.mean(axis=2)
    wheels = [scene.annotations[0], scene.annotations[1]]
    dx, dy = scene.distractor_centers[distractor]
    half_w = 2  # 5x5 patch stays inside the smallest wheel disk
    best = -1.0
    for a in wheels:
        # same sub-pixel phase by construction, so integer offsets align exactly
        ox, oy = round(dx - a.x), round(dy - a.y)
        cx, cy = int(math.floor(a.x)), int(math.floor(a.y))
        p = gray[cy - half_w:cy + half_w + 1, cx - half_w:cx + half_w + 1]
        q = gray[cy + oy - half_w:cy + oy + half_w + 1, cx + ox - half_w:cx + ox + half_w + 1]
        if p.shape != q.shape or p.size == 0:
            continue
        best = max(best, float(np.corrcoef(p.ravel(), q.ravel())[0, 1]))
    return best


# -- dataset I/O -------------------------------------------------------------

def _scene_record(scene: Scene, image_rel: str, mask_rel: str | None) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "id": scene.scene_id,
        "image": image_rel,
        "mask": mask_rel,
        "bbox": list(scene.bbox),
        "level": scene.level,
        "occluded_fraction": scene.occluded_fraction,
        "distractors": [list(c) for c in scene.distractor_centers],
        "keypoints": [[a.keypoint_id, a.x, a.y, bool(a.visible)] for a in scene.annotations],
    }


def write_dataset(scenes, path) -> Path:
    """Write ``manifest.jsonl`` plus lossless PPM images (and PGM masks)."""
    path = Path(path)
    try:
        (path / "images").mkdir(parents=True, exist_ok=True)
        with open(path / "manifest.jsonl", "w") as fh:
            for scene in scenes:
                image_rel = f"images/{scene.scene_id}.ppm"
                pixels = np.round(scene.image * 255.0).astype(np.uint8)
                Image.fromarray(pixels, "RGB").save(path / image_rel, format="PPM")
                mask_rel = None
                if scene.mask is not None:
                    mask_rel = f"images/{scene.scene_id}_mask.pgm"
                    Image.fromarray(scene.mask.astype(np.uint8) * 255, "L").save(path / mask_rel, format="PPM")
                fh.write(json.dumps(_scene_record(scene, image_rel, mask_rel)) + "\n")
    except OSError as exc:
        raise DataIOError(f"writing dataset to {path}: {exc}") from exc
    return path


def read_dataset(path) -> list[Scene]:
    path = Path(path)
    manifest = path / "manifest.jsonl"
    scenes = []
    try:
        with open(manifest) as fh:
            for lineno, line in enumerate(fh, 1):
                rec = json.loads(line)
                if rec.get("schema") != SCHEMA_VERSION:
                    raise DataIOError(f"{manifest}:{lineno}: schema {rec.get('schema')} != {SCHEMA_VERSION}")
                pixels = np.asarray(Image.open(path / rec["image"]).convert("RGB"))
                mask = None
                if rec.get("mask"):
                    mask = np.asarray(Image.open(path / rec["mask"])) > 0
                scenes.append(Scene(
                    scene_id=rec["id"],
                    image=(pixels / 255.0).astype(np.float32),
                    annotations=[KeypointAnnotation(int(k), float(x), float(y), bool(v)) for k, x, y, v in rec["keypoints"]],
                    bbox=tuple(rec["bbox"]),
                    mask=mask,
                    level=int(rec["level"]),
                    occluded_fraction=float(rec["occluded_fraction"]),
                    distractor_centers=[tuple(c) for c in rec.get("distractors", [])],
                ))
    except OSError as exc:
        raise DataIOError(f"reading dataset {path}: {exc}") from exc
    except (KeyError, ValueError, TypeError) as exc:
        raise DataIOError(f"malformed manifest {manifest}: {exc}") from exc
    return scenes


def dataset_checksum(path) -> str:
    """SHA-256 over the manifest and every file it references."""
    path = Path(path)
    digest = hashlib.sha256()
    manifest = (path / "manifest.jsonl").read_bytes()
    digest.update(manifest)
    for line in manifest.splitlines():
        rec = json.loads(line)
        for key in ("image", "mask"):
            if rec.get(key):
                digest.update((path / rec[key]).read_bytes())
    return digest.hexdigest()


def generate_split(config: GeneratorConfig, count: int, split: str, start: int = 0) -> list[Scene]:
    return [generate_scene(config, start + i, split) for i in range(count)]


def occluded_copies(scenes, level: int, seed: int) -> list[Scene]:
    """Occlude every scene at ``level`` with per-scene rng streams; ids get a level suffix."""
    out = []
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, level, i])
        occ = apply_occlusion(scene, level, rng)
        out.append(replace(occ, scene_id=f"{scene.scene_id}_lv{level}"))
    return out
