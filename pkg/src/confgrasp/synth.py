"""Seeded synthetic grasp scenes with analytically known grasps.

Objects are flat bars, ellipses and L-shapes on a table.  Every grasp closes
across the local object width, so the plate edge (and therefore ``theta``) runs
along the local object axis and the opening is the local width plus a margin.
A source and a shifted target domain differ in background texture, palette
and whether a depth map is rendered.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Sample, depth_to_3ch
from .geometry import GraspRect

PALETTES = {
    "source": {
        "background": [(0.62, 0.60, 0.56), (0.70, 0.68, 0.64), (0.55, 0.56, 0.58)],
        "objects": [(0.15, 0.30, 0.75), (0.80, 0.20, 0.15), (0.15, 0.60, 0.25), (0.90, 0.75, 0.10)],
    },
    "target": {
        "background": [(0.20, 0.32, 0.25), (0.28, 0.22, 0.35), (0.35, 0.30, 0.18)],
        "objects": [(0.95, 0.55, 0.20), (0.80, 0.80, 0.85), (0.85, 0.40, 0.70), (0.55, 0.85, 0.90)],
    },
}

_SPLIT_CODES = {"labelled": 0, "unlabelled": 1, "eval": 2}


@dataclass
class SynthConfig:
    seed: int = 0
    image_size: int = 64
    shapes: tuple[str, ...] = ("bar", "ellipse", "lshape")
    objects: tuple[int, int] = (1, 2)
    background: str = "gradient"  # or "stripes"
    palette: str = "source"
    brightness: tuple[float, float] = (0.9, 1.1)
    noise_std: float = 0.01
    texture_contrast: tuple[float, float] = (0.0, 0.0)
    emit_depth: bool = True
    theta_limit_deg: float = 72.0
    max_grasps: int = 5
    margin: float = 4.0
    domain: str = "source"

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.objects = tuple(self.objects)
        self.brightness = tuple(self.brightness)
        self.texture_contrast = tuple(self.texture_contrast)
        if self.palette not in PALETTES:
            raise ValueError(f"unknown palette {self.palette!r}")
        unknown = set(self.shapes) - {"bar", "ellipse", "lshape"}
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def source_config(seed: int = 0, image_size: int = 64) -> SynthConfig:
    return SynthConfig(seed=seed, image_size=image_size)


def target_config(seed: int = 0, image_size: int = 64) -> SynthConfig:
    """RGB-only shifted domain: striped backgrounds of varying contrast, new palette."""
    return SynthConfig(
        seed=seed,
        image_size=image_size,
        background="stripes",
        palette="target",
        texture_contrast=(0.0, 0.45),
        emit_depth=False,
        domain="target",
    )


# ---------------------------------------------------------------- analytic grasps


def _positions(n: int, half_span: float) -> np.ndarray:
    if n <= 1:
        return np.zeros(1)
    return np.linspace(-half_span, half_span, n)


def bar_grasps(cx, cy, phi, length, thick, n=3, margin=4.0) -> list[GraspRect]:
    """Grasps spaced along the bar axis; plates parallel to the axis."""
    u = np.array([math.cos(phi), math.sin(phi)])
    out = []
    for t in _positions(n, 0.15 * length * (n - 1)):
        out.append(GraspRect(cx + t * u[0], cy + t * u[1], phi, 0.4 * length, thick + margin))
    return out


def ellipse_grasps(cx, cy, phi, a, b, n=3, margin=4.0) -> list[GraspRect]:
    """Grasps along the major axis, opening = local chord across the minor axis."""
    u = np.array([math.cos(phi), math.sin(phi)])
    out = []
    for t in _positions(n, 0.175 * a * (n - 1)):
        chord = 2 * b * math.sqrt(max(1 - (t / a) ** 2, 0.0))
        out.append(GraspRect(cx + t * u[0], cy + t * u[1], phi, 0.6 * a, chord + margin))
    return out


def lshape_grasps(corner, phi_a, phi_b, len_a, len_b, thick, n=2, margin=4.0) -> list[GraspRect]:
    out = []
    for phi, ln in ((phi_a, len_a), (phi_b, len_b))[: max(n, 1)]:
        u = np.array([math.cos(phi), math.sin(phi)])
        c = np.asarray(corner) + u * (ln + thick / 2) / 2
        out.append(GraspRect(c[0], c[1], phi, 0.35 * ln, thick + margin))
    return out


# ---------------------------------------------------------------- rendering


def _box_sdf(px, py, cx, cy, phi, length, thick):
    c, s = math.cos(phi), math.sin(phi)
    dx, dy = px - cx, py - cy
    along = dx * c + dy * s
    across = -dx * s + dy * c
    return np.maximum(np.abs(along) - length / 2, np.abs(across) - thick / 2)


def _ellipse_sdf(px, py, cx, cy, phi, a, b):
    c, s = math.cos(phi), math.sin(phi)
    dx, dy = px - cx, py - cy
    along = dx * c + dy * s
    across = -dx * s + dy * c
    return (np.sqrt((along / a) ** 2 + (across / b) ** 2) - 1.0) * min(a, b)


@dataclass
class SceneObject:
    kind: str
    sdf: np.ndarray
    grasps: list[GraspRect]
    radius: float
    center: tuple[float, float]
    params: dict = field(default_factory=dict)


def _draw_angle(rng, lim):
    return float(rng.uniform(-lim, lim))


def _make_object(kind, cfg: SynthConfig, rng, px, py, n_grasps) -> SceneObject:
    size = cfg.image_size
    k = size / 64.0
    lim = math.radians(cfg.theta_limit_deg)
    if kind == "bar":
        length = rng.uniform(22, 34) * k
        thick = rng.uniform(5, 9) * k
        radius = length / 2 + 1
        cx, cy = (rng.uniform(radius + 2, size - radius - 2) for _ in range(2))
        phi = _draw_angle(rng, lim)
        sdf = _box_sdf(px, py, cx, cy, phi, length, thick)
        grasps = bar_grasps(cx, cy, phi, length, thick, n_grasps, cfg.margin * k)
        params = dict(phi=phi, length=length, thick=thick)
    elif kind == "ellipse":
        a = rng.uniform(10, 15) * k
        b = rng.uniform(4, 7) * k
        radius = a + 1
        cx, cy = (rng.uniform(radius + 2, size - radius - 2) for _ in range(2))
        phi = _draw_angle(rng, lim)
        sdf = _ellipse_sdf(px, py, cx, cy, phi, a, b)
        grasps = ellipse_grasps(cx, cy, phi, a, b, n_grasps, cfg.margin * k)
        params = dict(phi=phi, a=a, b=b)
    else:
        len_a = rng.uniform(15, 22) * k
        len_b = rng.uniform(15, 22) * k
        thick = rng.uniform(5, 8) * k
        lo = max(math.pi / 2 - lim, 0.0)
        phi_a = float(rng.uniform(lo + 0.05, lim - 0.05)) if lim - lo > 0.1 else math.pi / 4
        if rng.random() < 0.5:
            phi_a = -phi_a
        phi_b = phi_a - math.copysign(math.pi / 2, phi_a)
        ua = np.array([math.cos(phi_a), math.sin(phi_a)])
        ub = np.array([math.cos(phi_b), math.sin(phi_b)])
        if rng.random() < 0.5:
            ua = -ua
        if rng.random() < 0.5:
            ub = -ub
        # arm directions may be reversed; the grasp orientation is unchanged mod pi
        dir_a, dir_b = math.atan2(ua[1], ua[0]), math.atan2(ub[1], ub[0])
        # corner sits a quarter of the arm vectors away from the object center
        to_corner = -(ua * len_a + ub * len_b) / 4
        ends = [to_corner + ua * len_a, to_corner + ub * len_b, to_corner]
        radius = max(float(np.hypot(*e)) for e in ends) + thick
        cx, cy = (rng.uniform(radius + 2, size - radius - 2) for _ in range(2))
        corner = np.array([cx, cy]) + to_corner
        # each arm box extends back by thick/2 to fill the corner square
        ca = corner + ua * (len_a - thick / 2) / 2
        cb = corner + ub * (len_b - thick / 2) / 2
        sdf = np.minimum(
            _box_sdf(px, py, ca[0], ca[1], dir_a, len_a + thick / 2, thick),
            _box_sdf(px, py, cb[0], cb[1], dir_b, len_b + thick / 2, thick),
        )
        grasps = lshape_grasps(corner, dir_a, dir_b, len_a, len_b, thick, n_grasps, cfg.margin * k)
        params = dict(phi_a=phi_a, phi_b=phi_b, len_a=len_a, len_b=len_b, thick=thick)
    return SceneObject(kind, sdf, grasps, radius, (cx, cy), params)


def _background(cfg: SynthConfig, rng, px, py) -> np.ndarray:
    base = np.array(PALETTES[cfg.palette]["background"][rng.integers(len(PALETTES[cfg.palette]["background"]))])
    size = cfg.image_size
    if cfg.background == "stripes":
        contrast = rng.uniform(*cfg.texture_contrast)
        ang = rng.uniform(0, math.pi)
        period = rng.uniform(6, 14) * size / 64.0
        phase = rng.uniform(0, 2 * math.pi)
        wave = np.sin(2 * math.pi * (px * math.cos(ang) + py * math.sin(ang)) / period + phase)
        tex = contrast * wave
    else:
        g = rng.normal(0, 0.05, size=2)
        tex = (g[0] * (px - size / 2) + g[1] * (py - size / 2)) / size
    return np.clip(base[:, None, None] * (1.0 + tex[None]), 0, 1)


def render_scene(cfg: SynthConfig, rng: np.random.Generator):
    """Returns (rgb, raw_depth or None, annotations, objects)."""
    size = cfg.image_size
    py, px = np.mgrid[0:size, 0:size] + 0.5
    n_obj = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    objects: list[SceneObject] = []
    budget = cfg.max_grasps
    for i in range(n_obj):
        quota = min(3, budget - (n_obj - i - 1))
        if quota < 1:
            break
        for _ in range(50):
            kind = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
            obj = _make_object(kind, cfg, rng, px, py, quota)
            clear = all(
                math.hypot(obj.center[0] - o.center[0], obj.center[1] - o.center[1]) > obj.radius + o.radius + 2
                for o in objects
            )
            inside = all(0 <= g.x < size and 0 <= g.y < size for g in obj.grasps)
            if clear and inside:
                objects.append(obj)
                budget -= len(obj.grasps)
                break
    rgb = _background(cfg, rng, px, py)
    table = 0.8 + rng.normal(0, 0.01) + (px - size / 2) * rng.normal(0, 2e-4)
    depth = table.copy()
    palette = PALETTES[cfg.palette]["objects"]
    for obj in objects:
        alpha = np.clip(0.5 - obj.sdf, 0.0, 1.0)
        color = np.clip(np.array(palette[rng.integers(len(palette))]) + rng.normal(0, 0.05, 3), 0, 1)
        shade = 1.0 - 0.15 * np.clip(-obj.sdf / 4.0, 0, 1)
        rgb = rgb * (1 - alpha) + (color[:, None, None] * shade) * alpha
        height = rng.uniform(0.03, 0.06)
        depth = np.where(alpha > 0.5, table - height, depth)
    rgb = rgb * rng.uniform(*cfg.brightness) + rng.normal(0, cfg.noise_std, size=rgb.shape)
    rgb = np.clip(rgb, 0, 1).astype(np.float32)
    raw_depth = None
    if cfg.emit_depth:
        depth = depth + rng.normal(0, 0.001, size=depth.shape)
        holes = rng.random(depth.shape) < 0.002
        depth = np.where(holes, 0.0, depth)
        raw_depth = depth[None].astype(np.float32)
    anns = [g for o in objects for g in o.grasps][: cfg.max_grasps]
    return rgb, raw_depth, anns, objects


def render_sample(cfg: SynthConfig, split: str, index: int, labelled: bool) -> Sample:
    rng = np.random.default_rng([cfg.seed, _SPLIT_CODES[split], index])
    rgb, raw_depth, anns, _ = render_scene(cfg, rng)
    depth = depth_to_3ch(raw_depth) if raw_depth is not None else None
    sid = f"{cfg.domain}-{split}-{index:05d}"
    if not labelled:
        anns = []
    return Sample(rgb, depth, list(anns), bool(anns), cfg.domain, sid, raw_depth=raw_depth)


def synth_generate(cfg: SynthConfig, n_labelled: int, n_unlabelled: int, n_eval: int = 0):
    """(labelled, unlabelled, eval) sample lists; each sample has its own seed stream."""
    if min(n_labelled, n_unlabelled, n_eval) < 0:
        raise ValueError("sample counts must be non-negative")
    d_l = [render_sample(cfg, "labelled", i, True) for i in range(n_labelled)]
    d_u = [render_sample(cfg, "unlabelled", i, False) for i in range(n_unlabelled)]
    d_e = [render_sample(cfg, "eval", i, True) for i in range(n_eval)]
    return d_l, d_u, d_e
