"""Synthetic shape scenes and content-aligned transformed pairs.

The source domain D1 holds rendered scenes (value-noise background plus up to
four coloured shapes, one class per shape kind).  Each transform maps a scene
to an image of a different pixel distribution that shows the same content:

* ``photocopy``: grey contrast curve plus grain (pixel aligned)
* ``ripple``: smooth sinusoidal backward warp
* ``cubism``: Voronoi cells shifted independently, colour jitter, dark seams

Transformed label maps are for evaluation and baselines only.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InputError
from .layers import IGNORE_LABEL
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

SHAPE_KINDS = ("disc", "square", "triangle", "ring")
R_MIN, R_MAX = 9.0, 16.0  # circumradius in pixels on a 64 px canvas; scales with the canvas
PLACEMENT_TRIES = 20
SPLITS = ("train", "val", "test")
TRANSFORM_KINDS = ("none", "photocopy", "ripple", "cubism")

DEFAULT_PARAMS = {
    "none": {},
    "photocopy": {"contrast": 3.0, "grain": 0.01},
    "ripple": {"amplitude_px": 3.0, "wavelength_px": 16.0, "noise": 0.0},
    "cubism": {"cells": 40, "max_offset_px": 4.0, "jitter": 0.1},
}


@dataclass
class Scene:
    image: np.ndarray   # (3, H, W) in [0, 1]
    labels: np.ndarray  # (H, W) uint8 in [0, C)


@dataclass
class SamplePair:
    x1: Scene
    x2_image: np.ndarray
    x2_labels_eval: np.ndarray
    transform_id: str


@dataclass
class TransformSpec:
    kind: str = "none"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise InputError(f"unknown transform {self.kind!r}; expected one of {TRANSFORM_KINDS}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise InputError(f"unknown {self.kind} parameters: {sorted(unknown)}")
        self.params = {**DEFAULT_PARAMS[self.kind], **self.params}

    def apply(self, scene: Scene, seed: int) -> SamplePair:
        fn = {
            "none": lambda s, **kw: transform_none(s),
            "photocopy": transform_photocopy,
            "ripple": transform_ripple,
            "cubism": transform_cubism,
        }[self.kind]
        return fn(scene, seed=seed, **self.params) if self.kind != "none" else fn(scene)


def _value_noise(rng: np.random.Generator, size: int, grid: int) -> np.ndarray:
    """Smooth noise in [0, 1]: a random coarse grid, bilinearly upsampled."""
    coarse = rng.uniform(0.0, 1.0, (grid, grid))
    pos = np.linspace(0, grid - 1, size)
    i0 = np.minimum(np.floor(pos).astype(int), grid - 2)
    f = pos - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _shape_mask(kind: str, cx: float, cy: float, r: float, angle: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    cos, sin = np.cos(angle), np.sin(angle)
    u, v = cos * dx + sin * dy, -sin * dx + cos * dy
    if kind == "disc":
        return dx * dx + dy * dy <= r * r
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if kind == "square":
        half = r / np.sqrt(2.0)
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == "triangle":
        inside = np.ones((size, size), dtype=bool)
        for k in range(3):
            a = 2 * np.pi * k / 3
            # half-plane bounded by the edge opposite vertex k; inradius r/2
            inside &= (-np.cos(a) * u - np.sin(a) * v) <= 0.5 * r
        return inside
    raise InputError(f"unknown shape kind {kind!r}")


def generate_scene(seed: int, size: int = 64, n_classes: int = 5, n_shapes: int | None = None) -> Scene:
    """Render a scene: background class 0, shapes labelled 1..min(4, C-1)."""
    if size % 8:
        raise InputError(f"canvas size must be divisible by 8, got {size}")
    if n_classes < 2:
        raise InputError(f"need at least 2 classes, got {n_classes}")
    rng = np.random.default_rng(seed)
    kinds = SHAPE_KINDS[:min(len(SHAPE_KINDS), n_classes - 1)]

    base = rng.uniform(0.25, 0.75, 3)
    image = np.stack([
        np.clip(base[ch] + 0.35 * (_value_noise(rng, size, 5) - 0.5), 0, 1) for ch in range(3)
    ])
    labels = np.zeros((size, size), dtype=np.uint8)
    bg_mean = image.reshape(3, -1).mean(axis=1)

    count = int(rng.integers(1, 5)) if n_shapes is None else n_shapes
    r_min, r_max = R_MIN * size / 64, min(R_MAX * size / 64, size / 4)
    placed: list[tuple[float, float, float]] = []
    for _ in range(count):
        cls = int(rng.integers(1, len(kinds) + 1))
        r = rng.uniform(r_min, r_max)
        # shapes never overlap: bounding circles stay apart
        for _ in range(PLACEMENT_TRIES):
            cx, cy = rng.uniform(r, size - r, 2)
            if all((cx - px) ** 2 + (cy - py) ** 2 >= (r + pr) ** 2 for px, py, pr in placed):
                break
        else:
            continue
        placed.append((cx, cy, r))
        angle = rng.uniform(0, 2 * np.pi)
        color = rng.uniform(0, 1, 3)
        for _ in range(8):
            if np.linalg.norm(color - bg_mean) >= 0.35:
                break
            color = rng.uniform(0, 1, 3)
        mask = _shape_mask(kinds[cls - 1], cx, cy, r, angle, size)
        shade = 1.0 + 0.08 * (_value_noise(rng, size, 9) - 0.5)
        image[:, mask] = np.clip(color[:, None] * shade[mask][None, :], 0, 1)
        labels[mask] = cls
    return Scene(image=image, labels=labels)


def grayscale(image: np.ndarray) -> np.ndarray:
    lum = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    return np.stack([lum, lum, lum])


def _smoothstep(x: np.ndarray) -> np.ndarray:
    return x * x * (3.0 - 2.0 * x)


def transform_none(scene: Scene) -> SamplePair:
    return SamplePair(scene, scene.image.copy(), scene.labels.copy(), "none")


def transform_photocopy(scene: Scene, contrast: float = 3.0, grain: float = 0.01, seed: int = 0) -> SamplePair:
    """Luminance through a smoothstep contrast curve, greyscale, additive grain.

    ``contrast=1`` is the identity curve; larger values push towards (and past)
    the smoothstep S-curve.
    """
    if contrast <= 0:
        raise InputError(f"contrast must be > 0, got {contrast}")
    rng = np.random.default_rng(seed)
    lum = grayscale(scene.image)[0]
    if contrast != 1.0:
        lum = np.clip(lum + (contrast - 1.0) * (_smoothstep(lum) - lum), 0, 1)
    out = np.stack([lum, lum, lum])
    if grain > 0:
        out = np.clip(out + grain * rng.standard_normal(lum.shape)[None], 0, 1)
    return SamplePair(scene, out, scene.labels.copy(), "photocopy")


def bilinear_sample(image: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at float coordinates, clamping to the frame edge."""
    _, h, w = image.shape
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(int), w - 1)
    y0 = np.minimum(np.floor(sy).astype(int), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = sx - x0, sy - y0
    top = image[:, y0, x0] * (1 - fx) + image[:, y0, x1] * fx
    bot = image[:, y1, x0] * (1 - fx) + image[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def nearest_sample(labels: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Nearest-neighbour label lookup; sources outside the frame become IGNORE."""
    h, w = labels.shape
    ix = np.rint(sx).astype(int)
    iy = np.rint(sy).astype(int)
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.full(sx.shape, IGNORE_LABEL, dtype=np.uint8)
    out[inside] = labels[iy[inside], ix[inside]]
    return out


def ripple_field(h: int, w: int, amplitude_px: float, wavelength_px: float,
                 phase_x: float, phase_y: float) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates of the backward warp.

    x' = x + A sin(2 pi y / L + phase_x), y' = y + A sin(2 pi x / L + phase_y),
    with A tapered linearly to 0 over the last A pixels next to the frame.
    """
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if amplitude_px == 0:
        return xs, ys
    ax = amplitude_px * np.clip(np.minimum(xs, w - 1 - xs) / amplitude_px, 0, 1)
    ay = amplitude_px * np.clip(np.minimum(ys, h - 1 - ys) / amplitude_px, 0, 1)
    sx = xs + ax * np.sin(2 * np.pi * ys / wavelength_px + phase_x)
    sy = ys + ay * np.sin(2 * np.pi * xs / wavelength_px + phase_y)
    return sx, sy


def transform_ripple(scene: Scene, amplitude_px: float = 3.0, wavelength_px: float = 16.0,
                     noise: float = 0.0, seed: int = 0) -> SamplePair:
    if amplitude_px < 0 or wavelength_px <= 0:
        raise InputError("ripple needs amplitude >= 0 and wavelength > 0")
    rng = np.random.default_rng(seed)
    phase_x, phase_y = rng.uniform(0, 2 * np.pi, 2)
    _, h, w = scene.image.shape
    if amplitude_px == 0:
        image, labels = scene.image.copy(), scene.labels.copy()
    else:
        sx, sy = ripple_field(h, w, amplitude_px, wavelength_px, phase_x, phase_y)
        image = bilinear_sample(scene.image, sx, sy)
        labels = nearest_sample(scene.labels, sx, sy)
    if noise > 0:
        image = np.clip(image + noise * rng.standard_normal(image.shape), 0, 1)
    return SamplePair(scene, image, labels, "ripple")


def _disc_offsets(max_offset: float) -> np.ndarray:
    m = int(np.floor(max_offset))
    grid = np.array([(dx, dy) for dy in range(-m, m + 1) for dx in range(-m, m + 1)
                     if dx * dx + dy * dy <= max_offset * max_offset])
    return grid.reshape(-1, 2)


def cubism_cells(h: int, w: int, cells: int, rng: np.random.Generator) -> np.ndarray:
    """Voronoi cell index of each pixel for ``cells`` uniformly drawn sites."""
    sites = rng.uniform(0, [w, h], (cells, 2))
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    d2 = (xs[..., None] - sites[:, 0]) ** 2 + (ys[..., None] - sites[:, 1]) ** 2
    return d2.argmin(axis=-1)


def transform_cubism(scene: Scene, cells: int = 40, max_offset_px: float = 4.0,
                     jitter: float = 0.1, seed: int = 0) -> SamplePair:
    """Each Voronoi cell copies x1 under its own integer translation.

    Returns the pair; per-pixel source displacements are bounded by
    ``max_offset_px`` by construction.
    """
    pair, _ = cubism_with_offsets(scene, cells, max_offset_px, jitter, seed)
    return pair


def cubism_with_offsets(scene: Scene, cells: int, max_offset_px: float, jitter: float,
                        seed: int) -> tuple[SamplePair, np.ndarray]:
    if cells < 1:
        raise InputError(f"cells must be >= 1, got {cells}")
    if max_offset_px < 0 or jitter < 0:
        raise InputError("max_offset_px and jitter must be >= 0")
    rng = np.random.default_rng(seed)
    _, h, w = scene.image.shape
    cell = cubism_cells(h, w, cells, rng)
    choices = _disc_offsets(max_offset_px)
    ys, xs = np.mgrid[0:h, 0:w]
    # each cell draws among the translations that keep all of it inside the frame
    offsets = np.zeros((cells, 2), dtype=int)
    for k in range(cells):
        inside = cell == k
        if not inside.any():
            continue
        cx, cy = xs[inside], ys[inside]
        ok = ((cx.min() + choices[:, 0] >= 0) & (cx.max() + choices[:, 0] <= w - 1)
              & (cy.min() + choices[:, 1] >= 0) & (cy.max() + choices[:, 1] <= h - 1))
        valid = choices[ok]
        offsets[k] = valid[rng.integers(0, len(valid))]
    shifts = rng.uniform(-jitter, jitter, (cells, 3)) if jitter > 0 else np.zeros((cells, 3))

    sx = xs + offsets[cell, 0]
    sy = ys + offsets[cell, 1]
    image = scene.image[:, np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)]
    if jitter > 0:
        image = image + shifts[cell].transpose(2, 0, 1)
    seam = np.zeros((h, w), dtype=bool)
    seam[:, :-1] |= cell[:, :-1] != cell[:, 1:]
    seam[:-1, :] |= cell[:-1, :] != cell[1:, :]
    image = np.where(seam[None], image * 0.5, image)
    labels = nearest_sample(scene.labels, sx.astype(np.float64), sy.astype(np.float64))
    pair = SamplePair(scene, np.clip(image, 0, 1), labels, "cubism")
    return pair, np.stack([sx - xs, sy - ys])


def _child_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def scene_seed(seed: int, split: str, index: int) -> int:
    return _child_seed(seed, SPLITS.index(split), index)


def generate_pair(seed: int, split: str, index: int, transform: TransformSpec,
                  size: int = 64, n_classes: int = 5) -> SamplePair:
    """Pair ``index`` of ``split``; depends only on its arguments."""
    scene = generate_scene(scene_seed(seed, split, index), size, n_classes)
    return transform.apply(scene, _child_seed(transform.seed, SPLITS.index(split), index, 1))


def build_dataset(root, n_train: int, n_val: int, n_test: int, transform: TransformSpec,
                  seed: int = 0, size: int = 64, n_classes: int = 5) -> Path:
    """Write every split of a paired corpus under ``root`` plus ``meta.json``."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if min(counts.values()) < 1:
        raise InputError(f"split counts must be >= 1, got {counts}")
    root = Path(root)
    for split, n in counts.items():
        d = root / split
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {d}: {exc}") from exc
        for i in range(n):
            pair = generate_pair(seed, split, i, transform, size, n_classes)
            stem = d / f"{i:05d}"
            write_ppm(f"{stem}_x1.ppm", pair.x1.image)
            write_ppm(f"{stem}_x2.ppm", pair.x2_image)
            write_pgm(f"{stem}_y1.pgm", pair.x1.labels)
            write_pgm(f"{stem}_y2.pgm", pair.x2_labels_eval)
    meta = {
        "seed": seed,
        "size": size,
        "n_classes": n_classes,
        "counts": counts,
        "transform": asdict(transform),
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def read_meta(root) -> dict:
    path = Path(root) / "meta.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest {path}: {exc}") from exc


@dataclass
class PairedImages:
    """Aligned (x1, x2) image stacks; deliberately carries no labels."""

    x1: np.ndarray
    x2: np.ndarray


@dataclass
class LabeledImages:
    images: np.ndarray
    labels: np.ndarray


def _count(root: Path, split: str) -> int:
    return int(read_meta(root)["counts"][split])


def _load_images(root: Path, split: str, part: str) -> np.ndarray:
    n = _count(root, split)
    return np.stack([read_ppm(root / split / f"{i:05d}_{part}.ppm") for i in range(n)]).astype(np.float32) / 255.0


def load_pairs(root, split: str = "train") -> PairedImages:
    """Images only; label files are never opened."""
    root = Path(root)
    return PairedImages(_load_images(root, split, "x1"), _load_images(root, split, "x2"))


def load_labeled(root, split: str, side: str) -> LabeledImages:
    """``side='x1'`` reads source images/labels, ``side='x2'`` the transformed ones."""
    if side not in ("x1", "x2"):
        raise InputError(f"side must be 'x1' or 'x2', got {side!r}")
    root = Path(root)
    part = "y1" if side == "x1" else "y2"
    n = _count(root, split)
    images = _load_images(root, split, side)
    labels = np.stack([read_pgm(root / split / f"{i:05d}_{part}.pgm") for i in range(n)])
    return LabeledImages(images, labels)


@dataclass
class SplitArrays:
    """One split held in memory, quantised exactly as the on-disk files."""

    x1: np.ndarray
    y1: np.ndarray
    x2: np.ndarray
    y2: np.ndarray

    def pairs(self) -> PairedImages:
        return PairedImages(self.x1, self.x2)

    def source(self) -> LabeledImages:
        return LabeledImages(self.x1, self.y1)

    def target(self) -> LabeledImages:
        return LabeledImages(self.x2, self.y2)


def generate_split(n: int, split: str, transform: TransformSpec, seed: int = 0,
                   size: int = 64, n_classes: int = 5) -> SplitArrays:
    from .netpbm import to_uint8

    x1, y1, x2, y2 = [], [], [], []
    for i in range(n):
        pair = generate_pair(seed, split, i, transform, size, n_classes)
        x1.append(to_uint8(pair.x1.image))
        x2.append(to_uint8(pair.x2_image))
        y1.append(pair.x1.labels)
        y2.append(pair.x2_labels_eval)
    as_float = lambda a: np.stack(a).astype(np.float32) / 255.0  # noqa: E731
    return SplitArrays(as_float(x1), np.stack(y1), as_float(x2), np.stack(y2))
