"""Samples, Cornell-format I/O, preprocessing, depth channels and augmentation."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import GeometryError, GraspRect, format_rect_lines, normalize_angle, parse_rect_lines, rect_from_vertices

log = logging.getLogger(__name__)

RAW_SIZE = (640, 480)
RESIZED = (456, 342)
CROP = 288


class DataError(ValueError):
    pass


@dataclass
class Transform:
    """Flip, then rotate by ``rot`` quarter turns, then shift, on a square frame."""

    size: int
    flip: bool = False
    rot: int = 0
    dx: int = 0
    dy: int = 0

    def map_point(self, x: float, y: float) -> tuple[float, float]:
        s = self.size
        if self.flip:
            x = s - x
        for _ in range(self.rot % 4):
            x, y = y, s - x
        return x + self.dx, y + self.dy

    def inverse_point(self, x: float, y: float) -> tuple[float, float]:
        s = self.size
        x, y = x - self.dx, y - self.dy
        for _ in range(self.rot % 4):
            x, y = s - y, x
        if self.flip:
            x = s - x
        return x, y

    def map_theta(self, theta: float) -> float:
        if self.flip:
            theta = -theta
        return normalize_angle(theta + (self.rot % 4) * math.pi / 2)

    def inverse_theta(self, theta: float) -> float:
        theta = normalize_angle(theta - (self.rot % 4) * math.pi / 2)
        return normalize_angle(-theta) if self.flip else theta

    def apply_image(self, img: np.ndarray) -> np.ndarray:
        """Apply to a (C, H, W) array; vacated pixels are zero."""
        out = img[:, :, ::-1] if self.flip else img
        if self.rot % 4:
            out = np.rot90(out, self.rot % 4, axes=(1, 2))
        if self.dx or self.dy:
            out = _shift(out, self.dx, self.dy)
        return np.ascontiguousarray(out)

    def apply_depth(self, depth3: np.ndarray) -> np.ndarray:
        """Like :meth:`apply_image`, with the x/y gradient channels re-signed and swapped."""
        gx, gy = depth3[1], depth3[2]
        if self.flip:
            gx = -gx
        for _ in range(self.rot % 4):
            gx, gy = gy, -gx
        return self.apply_image(np.stack([depth3[0], gx, gy]))


def _shift(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape[1:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = img[:, ys, xs]
    return out


@dataclass
class Sample:
    rgb: np.ndarray  # (3, H, W) in [0, 1]
    depth: Optional[np.ndarray] = None  # (3, H, W)
    annotations: list[GraspRect] = field(default_factory=list)
    labelled: bool = False
    domain: str = "source"
    id: str = ""
    raw_depth: Optional[np.ndarray] = None  # (1, H, W) before channel expansion
    transform: Optional[Transform] = None

    def __post_init__(self):
        if self.labelled != bool(self.annotations):
            raise DataError(f"sample {self.id}: labelled={self.labelled} but {len(self.annotations)} annotations")
        if self.depth is not None and self.depth.shape[1:] != self.rgb.shape[1:]:
            raise DataError(f"sample {self.id}: depth {self.depth.shape} does not match rgb {self.rgb.shape}")

    @property
    def size(self) -> int:
        return self.rgb.shape[-1]

    def unlabelled(self) -> "Sample":
        return replace(self, annotations=[], labelled=False)


# ---------------------------------------------------------------- depth


def inpaint_nearest(depth: np.ndarray, missing: float = 0.0) -> np.ndarray:
    hole = depth == missing
    if hole.all():
        raise DataError("depth map has no valid pixels")
    if not hole.any():
        return depth
    idx = ndimage.distance_transform_edt(hole, return_distances=False, return_indices=True)
    return depth[tuple(idx)]


def depth_to_3ch(depth: np.ndarray) -> np.ndarray:
    """(1, H, W) or (H, W) depth -> standardized depth plus x and y Sobel channels."""
    d = np.asarray(depth, dtype=np.float64)
    d = d[0] if d.ndim == 3 else d
    if not np.all(np.isfinite(d)):
        raise DataError("depth map contains non-finite values")
    d = inpaint_nearest(d)
    if d.max() == d.min():
        z = np.zeros_like(d)
    else:
        z = (d - d.mean()) / max(d.std(), 1e-6)
    gx = ndimage.sobel(z, axis=1, mode="nearest")
    gy = ndimage.sobel(z, axis=0, mode="nearest")
    return np.stack([z, gx, gy]).astype(np.float32)


# ---------------------------------------------------------------- preprocessing


def resize_image(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) float array."""
    chans = [
        np.asarray(Image.fromarray(np.ascontiguousarray(c, dtype=np.float32), mode="F").resize((width, height), Image.BILINEAR))
        for c in img
    ]
    return np.stack(chans).astype(np.float32)


def transform_rect(r: GraspRect, sx: float, sy: float, ox: float, oy: float) -> GraspRect:
    """Scale by (sx, sy) then subtract the crop origin; exact for equal scales."""
    if not math.isclose(sx, sy, rel_tol=1e-3):
        # anisotropic scaling of a rotated rectangle: transform the corners
        from .geometry import vertices_from_rect

        v = vertices_from_rect(r) * np.array([sx, sy]) - np.array([ox, oy])
        return rect_from_vertices(v, tol=max(r.w, r.h))
    return GraspRect(r.x * sx - ox, r.y * sy - oy, r.theta, r.w * sx, r.h * sx)


def preprocess(
    image: np.ndarray,
    annotations: Sequence[GraspRect] = (),
    resized: tuple[int, int] = RESIZED,
    crop: int = CROP,
) -> tuple[np.ndarray, list[GraspRect]]:
    """Resize a (C, H, W) frame to ``resized`` (width, height) and center-crop."""
    _, h, w = image.shape
    rw, rh = resized
    if rw < crop or rh < crop:
        raise DataError(f"resized frame {resized} is smaller than the {crop}px crop")
    out = resize_image(image, rw, rh)
    ox, oy = (rw - crop) // 2, (rh - crop) // 2
    out = out[:, oy : oy + crop, ox : ox + crop]
    sx, sy = rw / w, rh / h
    kept = []
    for a in annotations:
        t = transform_rect(a, sx, sy, ox, oy)
        if 0 <= t.x < crop and 0 <= t.y < crop:
            kept.append(t)
    return out, kept


# ---------------------------------------------------------------- augmentation


def augment(
    s: Sample,
    seed,
    flip_p: float = 0.5,
    rotate: bool = True,
    max_shift: int = 8,
    photometric: bool = True,
    noise_std: float = 0.02,
    brightness: tuple[float, float] = (0.8, 1.2),
    force_flip: Optional[bool] = None,
    force_rot: Optional[int] = None,
) -> Sample:
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < flip_p)
    rot = int(rng.integers(0, 4)) if rotate else 0
    dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2)) if max_shift else (0, 0)
    if force_flip is not None:
        flip = force_flip
    if force_rot is not None:
        rot = force_rot
    t = Transform(s.size, flip, rot, dx, dy)
    rgb = t.apply_image(s.rgb)
    if photometric:
        rgb = rgb * rng.uniform(*brightness) + rng.normal(0.0, noise_std, size=rgb.shape)
        rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)
    depth = t.apply_depth(s.depth) if s.depth is not None else None
    anns = []
    for a in s.annotations:
        x, y = t.map_point(a.x, a.y)
        if 0 <= x < s.size and 0 <= y < s.size:
            anns.append(GraspRect(x, y, t.map_theta(a.theta), a.w, a.h))
    prior = s.transform
    return replace(
        s,
        rgb=rgb,
        depth=depth,
        annotations=anns,
        labelled=bool(anns),
        raw_depth=None,
        transform=t if prior is None else _Composed(prior, t),
    )


class _Composed(Transform):
    """Two transforms applied in sequence (first, then second)."""

    def __init__(self, first: Transform, second: Transform):
        super().__init__(first.size)
        self.first, self.second = first, second

    def map_point(self, x, y):
        return self.second.map_point(*self.first.map_point(x, y))

    def inverse_point(self, x, y):
        return self.first.inverse_point(*self.second.inverse_point(x, y))

    def map_theta(self, theta):
        return self.second.map_theta(self.first.map_theta(theta))

    def inverse_theta(self, theta):
        return self.first.inverse_theta(self.second.inverse_theta(theta))

    def apply_image(self, img):
        return self.second.apply_image(self.first.apply_image(img))

    def apply_depth(self, depth3):
        return self.second.apply_depth(self.first.apply_depth(depth3))


# ---------------------------------------------------------------- Cornell-format directories

_IMG_RE = re.compile(r"^(?P<id>.+)r\.(png|jpg|jpeg|bmp|tif|tiff)$", re.IGNORECASE)


def read_rect_file(path: Path) -> list[GraspRect]:
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise OSError(f"cannot read rectangle file {path}: {e}") from e
    rects = []
    for i, verts in enumerate(parse_rect_lines(lines, source=str(path))):
        if not np.all(np.isfinite(verts)):
            log.warning("%s: rectangle %d has non-finite vertices, skipped", path, i)
            continue
        try:
            rects.append(rect_from_vertices(verts))
        except GeometryError as e:
            log.warning("%s: rectangle %d skipped (%s)", path, i, e)
    return rects


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as e:
        raise OSError(f"cannot read image {path}: {e}") from e
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_depth(path: Path) -> np.ndarray:
    try:
        if path.suffix == ".npy":
            arr = np.load(path)
        else:
            with Image.open(path) as im:
                arr = np.asarray(im, dtype=np.float32)
    except OSError as e:
        raise OSError(f"cannot read depth {path}: {e}") from e
    return np.asarray(arr, dtype=np.float32).reshape(1, *arr.shape[-2:])


def _fit(rgb, raw_depth, anns, size):
    """Bring a frame to ``size`` x ``size``: raw Cornell frames get the full pipeline."""
    h, w = rgb.shape[1:]
    if (w, h) == RAW_SIZE:
        rgb2, anns = preprocess(rgb, anns)
        if raw_depth is not None:
            raw_depth, _ = preprocess(raw_depth)
        rgb, h, w = rgb2, CROP, CROP
    if size is not None and (h, w) != (size, size):
        if h != w:
            raise DataError(f"cannot fit a {w}x{h} frame to {size}x{size}")
        scale = size / w
        rgb = resize_image(rgb, size, size)
        if raw_depth is not None:
            raw_depth = resize_image(raw_depth, size, size)
        anns = [GraspRect(a.x * scale, a.y * scale, a.theta, a.w * scale, a.h * scale) for a in anns]
        anns = [a for a in anns if 0 <= a.x < size and 0 <= a.y < size]
    return rgb, raw_depth, anns


def load_cornell_dir(path, size: Optional[int] = None, domain: Optional[str] = None) -> list[Sample]:
    """One sample per ``<id>r.<ext>`` image; ``<id>cpos.txt`` and ``<id>d.tiff`` are optional."""
    root = Path(path)
    if not root.is_dir():
        raise OSError(f"data directory {root} does not exist or is not readable")
    domain = domain or root.name
    samples = []
    for img_path in sorted(root.iterdir()):
        m = _IMG_RE.match(img_path.name)
        if not m:
            continue
        sid = m.group("id")
        rgb = read_image(img_path)
        rect_path = root / f"{sid}cpos.txt"
        anns = read_rect_file(rect_path) if rect_path.exists() else []
        if rect_path.exists() and not anns:
            log.warning("%s: no valid rectangles, sample marked unlabelled", rect_path)
        raw_depth = None
        for cand in (f"{sid}d.tiff", f"{sid}d.tif", f"{sid}d.npy"):
            if (root / cand).exists():
                raw_depth = read_depth(root / cand)
                break
        rgb, raw_depth, anns = _fit(rgb, raw_depth, anns, size)
        depth = depth_to_3ch(raw_depth) if raw_depth is not None else None
        samples.append(
            Sample(rgb, depth, anns, bool(anns), domain, sid, raw_depth=raw_depth)
        )
    samples.sort(key=lambda s: s.id)
    return samples


def write_sample(root: Path, s: Sample) -> None:
    img = np.clip(np.rint(s.rgb.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(root / f"{s.id}r.png", optimize=False)
    if s.labelled:
        (root / f"{s.id}cpos.txt").write_text(format_rect_lines(s.annotations))
    if s.raw_depth is not None:
        Image.fromarray(np.ascontiguousarray(s.raw_depth[0], dtype=np.float32), mode="F").save(root / f"{s.id}d.tiff")


def write_dataset(root, splits: dict[str, list[Sample]], manifest: dict) -> None:
    """Cornell-format files plus ``manifest.json`` and ``manifest.csv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for split in sorted(splits):
        for s in splits[split]:
            write_sample(root, s)
            rows.append((s.id, f"{s.id}r.png", int(s.labelled), s.domain))
    man = dict(manifest)
    man["splits"] = {k: [s.id for s in v] for k, v in sorted(splits.items())}
    (root / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "path", "labelled", "domain"])
        w.writerows(sorted(rows))


def load_dataset(root, size: Optional[int] = None) -> dict[str, list[Sample]]:
    """Splits of a directory written by :func:`write_dataset`; plain Cornell dirs map to ``all``."""
    root = Path(root)
    samples = load_cornell_dir(root, size=size)
    man_path = root / "manifest.json"
    if not man_path.exists():
        return {"all": samples}
    man = json.loads(man_path.read_text())
    by_id = {s.id: s for s in samples}
    domains = {}
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            domains[row["id"]] = row["domain"]
    out = {}
    for split, ids in man["splits"].items():
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"{root}: manifest lists missing samples {missing[:3]}")
        out[split] = [replace(by_id[i], domain=domains.get(i, by_id[i].domain)) for i in ids]
    return out
