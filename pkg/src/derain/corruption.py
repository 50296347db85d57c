"""Synthetic road scenes with known car boxes, and adherent-droplet corruption.

A droplet behaves as a small lens: inside its disk the image is resampled
through a radial magnification about the droplet centre, blurred, and
feathered into the surroundings over one pixel. Streaks are blurred
line-segment swaths. Nothing outside a droplet disk (radius + 1) or a
streak swath (half-width + 1) is ever touched.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import correlate1d

from .data import AlignedPair, SceneGroundTruth, as_raster, quantize
from .errors import PlacementFailure

U64 = 0xFFFFFFFFFFFFFFFF


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & U64)


@dataclass(frozen=True)
class Droplet:
    center: tuple[float, float]
    radius: float
    magnification: float
    blur_sigma: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("droplet radius must be positive")
        if not self.magnification > 0:
            raise ValueError("droplet magnification must be positive")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be non-negative")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))


@dataclass(frozen=True)
class Streak:
    start: tuple[float, float]
    end: tuple[float, float]
    width: float
    blur_sigma: float = 0.0

    def __post_init__(self):
        if tuple(self.start) == tuple(self.end):
            raise ValueError("streak start and end must differ")
        if not self.width > 0:
            raise ValueError("streak width must be positive")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be non-negative")
        object.__setattr__(self, "start", (float(self.start[0]), float(self.start[1])))
        object.__setattr__(self, "end", (float(self.end[0]), float(self.end[1])))


@dataclass(frozen=True)
class DropletField:
    droplets: tuple[Droplet, ...] = ()
    streaks: tuple[Streak, ...] = ()
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "seed": int(self.seed),
            "droplets": {
                "center_x": [d.center[0] for d in self.droplets],
                "center_y": [d.center[1] for d in self.droplets],
                "radius": [d.radius for d in self.droplets],
                "magnification": [d.magnification for d in self.droplets],
                "blur_sigma": [d.blur_sigma for d in self.droplets],
            },
            "streaks": {
                "start_x": [s.start[0] for s in self.streaks],
                "start_y": [s.start[1] for s in self.streaks],
                "end_x": [s.end[0] for s in self.streaks],
                "end_y": [s.end[1] for s in self.streaks],
                "width": [s.width for s in self.streaks],
                "blur_sigma": [s.blur_sigma for s in self.streaks],
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DropletField":
        d, s = obj["droplets"], obj["streaks"]
        droplets = tuple(
            Droplet((x, y), r, m, b)
            for x, y, r, m, b in zip(d["center_x"], d["center_y"], d["radius"], d["magnification"], d["blur_sigma"])
        )
        streaks = tuple(
            Streak((sx, sy), (ex, ey), w, b)
            for sx, sy, ex, ey, w, b in zip(s["start_x"], s["start_y"], s["end_x"], s["end_y"], s["width"], s["blur_sigma"])
        )
        return cls(droplets=droplets, streaks=streaks, seed=int(obj["seed"]))


@dataclass(frozen=True)
class CorruptionParams:
    """Sampling ranges for droplet fields. Lengths are fractions of the shorter image side."""

    radius: tuple[float, float] = (0.08, 0.16)
    magnification: tuple[float, float] = (1.8, 3.0)
    blur_sigma: tuple[float, float] = (0.8, 1.8)
    streaks_per_droplet: float = 0.25
    streak_length: tuple[float, float] = (0.15, 0.35)
    streak_width: tuple[float, float] = (0.03, 0.06)
    streak_blur: tuple[float, float] = (0.8, 1.5)

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> "CorruptionParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


# Droplets per megapixel. Tuned so the oracle detector finds roughly a fifth
# of the cars in distorted 64x64 scenes.
DEFAULT_DENSITY = 6000.0


def sample_droplet_field(
    image_dims: tuple[int, int],
    density: float,
    seed: int,
    params: CorruptionParams | None = None,
) -> DropletField:
    """Draw a Poisson number of droplets (``density`` per megapixel) plus streaks."""
    if density < 0:
        raise ValueError("density must be non-negative")
    params = params or CorruptionParams()
    w, h = image_dims
    side = min(w, h)
    rng = _rng(seed)
    lam = density * (w * h) / 1e6
    n_drop = int(rng.poisson(lam))
    n_streak = int(rng.poisson(lam * params.streaks_per_droplet)) if lam > 0 else 0

    def uniform(lo_hi, scale=1.0):
        lo, hi = lo_hi
        return float(rng.uniform(lo, hi)) * scale

    droplets = []
    for _ in range(n_drop):
        droplets.append(
            Droplet(
                center=(float(rng.uniform(0, w)), float(rng.uniform(0, h))),
                radius=max(uniform(params.radius, side), 0.5),
                magnification=uniform(params.magnification),
                blur_sigma=uniform(params.blur_sigma),
            )
        )
    streaks = []
    for _ in range(n_streak):
        sx, sy = float(rng.uniform(0, w)), float(rng.uniform(0, h))
        length = max(uniform(params.streak_length, side), 1.0)
        # mostly downward runs
        angle = math.pi / 2 + float(rng.uniform(-0.4, 0.4))
        ex = float(np.clip(sx + length * math.cos(angle), 0, w - 1))
        ey = float(np.clip(sy + length * math.sin(angle), 0, h - 1))
        if (ex, ey) == (sx, sy):
            ey = sy - 1.0 if sy >= 1.0 else sy + 1.0
        streaks.append(
            Streak(
                start=(sx, sy),
                end=(ex, ey),
                width=max(uniform(params.streak_width, side), 1.0),
                blur_sigma=uniform(params.streak_blur),
            )
        )
    return DropletField(droplets=tuple(droplets), streaks=tuple(streaks), seed=int(seed))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian truncated at ceil(3 sigma); ``[1.0]`` for sigma 0."""
    if sigma <= 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):
        # a vanishing sigma underflows the side taps to zero, leaving a delta
        g = np.exp(-0.5 * (k / sigma) ** 2)
    return g / g.sum()


def _blur_window(win: np.ndarray, sigma: float) -> np.ndarray:
    g = gaussian_kernel(sigma)
    if g.size == 1:
        return win
    out = correlate1d(win, g, axis=0, mode="nearest")
    return correlate1d(out, g, axis=1, mode="nearest")


def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w, _ = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _bbox(x0, x1, y0, y1, w, h):
    xa, xb = max(int(math.ceil(x0)), 0), min(int(math.floor(x1)), w - 1)
    ya, yb = max(int(math.ceil(y0)), 0), min(int(math.floor(y1)), h - 1)
    if xa > xb or ya > yb:
        return None
    return xa, xb, ya, yb


def _apply_droplet(img: np.ndarray, d: Droplet) -> None:
    h, w, _ = img.shape
    cx, cy = d.center
    reach = d.radius + 1.0
    box = _bbox(cx - reach, cx + reach, cy - reach, cy + reach, w, h)
    if box is None:
        return
    xa, xb, ya, yb = box
    kr = len(gaussian_kernel(d.blur_sigma)) // 2
    wxa, wxb = max(xa - kr, 0), min(xb + kr, w - 1)
    wya, wyb = max(ya - kr, 0), min(yb + kr, h - 1)
    qy, qx = np.mgrid[wya:wyb + 1, wxa:wxb + 1].astype(np.float64)
    warped = _bilinear(img, cx + (qx - cx) / d.magnification, cy + (qy - cy) / d.magnification)
    blurred = _blur_window(warped, d.blur_sigma)[ya - wya:yb - wya + 1, xa - wxa:xb - wxa + 1]
    py, px = np.mgrid[ya:yb + 1, xa:xb + 1].astype(np.float64)
    alpha = np.clip(reach - np.hypot(px - cx, py - cy), 0.0, 1.0)
    _composite(img, blurred, alpha, xa, ya)


def segment_distance(px, py, start, end):
    """Euclidean distance from points to the segment ``start``-``end``."""
    (sx, sy), (ex, ey) = start, end
    dx, dy = ex - sx, ey - sy
    norm = dx * dx + dy * dy
    if norm == 0.0:
        t = 0.0
    else:
        t = np.clip(((px - sx) * dx + (py - sy) * dy) / norm, 0.0, 1.0)
    return np.hypot(px - (sx + t * dx), py - (sy + t * dy))


def _apply_streak(img: np.ndarray, s: Streak) -> None:
    h, w, _ = img.shape
    reach = s.width / 2.0 + 1.0
    xs, ys = (s.start[0], s.end[0]), (s.start[1], s.end[1])
    box = _bbox(min(xs) - reach, max(xs) + reach, min(ys) - reach, max(ys) + reach, w, h)
    if box is None:
        return
    xa, xb, ya, yb = box
    kr = len(gaussian_kernel(s.blur_sigma)) // 2
    wxa, wxb = max(xa - kr, 0), min(xb + kr, w - 1)
    wya, wyb = max(ya - kr, 0), min(yb + kr, h - 1)
    window = img[wya:wyb + 1, wxa:wxb + 1].astype(np.float64)
    blurred = _blur_window(window, s.blur_sigma)[ya - wya:yb - wya + 1, xa - wxa:xb - wxa + 1]
    py, px = np.mgrid[ya:yb + 1, xa:xb + 1].astype(np.float64)
    alpha = np.clip(reach - segment_distance(px, py, s.start, s.end), 0.0, 1.0)
    _composite(img, blurred, alpha, xa, ya)


def _composite(img, layer, alpha, xa, ya):
    region = img[ya:ya + alpha.shape[0], xa:xa + alpha.shape[1]]
    mask = alpha > 0
    a = alpha[..., None]
    mixed = a * layer + (1.0 - a) * region
    region[mask] = mixed[mask]


def corruption_support(dims: tuple[int, int], fld: DropletField) -> np.ndarray:
    """Boolean (H, W) mask of pixels a field is allowed to modify."""
    w, h = dims
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    for d in fld.droplets:
        mask |= np.hypot(px - d.center[0], py - d.center[1]) < d.radius + 1.0
    for s in fld.streaks:
        mask |= segment_distance(px, py, s.start, s.end) < s.width / 2.0 + 1.0
    return mask


def apply_corruption(clear: np.ndarray, fld: DropletField) -> np.ndarray:
    """Render ``fld`` over ``clear``; droplets first, then streaks, in list order.

    float64 input stays float64; anything else comes back as a float32 raster.
    Pixels outside the field's support are copied unchanged.
    """
    as_raster(clear)
    arr = np.asarray(clear)
    src = arr.copy() if arr.dtype == np.float64 else np.array(arr, dtype=np.float32)
    img = src.astype(np.float64)
    for d in fld.droplets:
        _apply_droplet(img, d)
    for s in fld.streaks:
        _apply_streak(img, s)
    touched = corruption_support((src.shape[1], src.shape[0]), fld)
    src[touched] = np.clip(img[touched], 0.0, 1.0)
    return src


# --- scenes ------------------------------------------------------------------

GLYPH_SIZE = (14, 8)
BODY = (0.85, 0.12, 0.10)
ROOF = (0.45, 0.05, 0.05)
WINDOW = (0.65, 0.88, 0.98)
WHEEL = (0.05, 0.05, 0.05)


def car_glyph(width: int = GLYPH_SIZE[0], height: int = GLYPH_SIZE[1]) -> np.ndarray:
    """The two-tone car sprite; it fills its bounding box completely."""
    if width < 6 or height < 4:
        raise ValueError("car glyph must be at least 6x4 pixels")
    g = np.empty((height, width, 3), dtype=np.float32)
    g[:] = BODY
    roof_rows = max(height * 3 // 8, 1)
    g[:roof_rows] = ROOF
    wx0, wx1 = width // 4, width - width // 4
    g[: roof_rows, wx0:wx1] = WINDOW
    r = max(height / 5.0, 1.0)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    for wcx in (width * 0.22, width * 0.78 - 1):
        wheel = np.hypot(xx - wcx, yy - (height - 1 - r * 0.6)) <= r
        g[wheel] = WHEEL
    return g


@dataclass(frozen=True)
class SceneSpec:
    car_count: int
    background: str = "road"
    seed: int = 0
    glyph_size: tuple[int, int] = GLYPH_SIZE

    def __post_init__(self):
        if self.car_count < 0:
            raise ValueError("car_count must be non-negative")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background style {self.background!r}")


def _road_background(w: int, h: int, rng: np.random.Generator) -> np.ndarray:
    img = np.empty((h, w, 3), dtype=np.float64)
    horizon = h // 3
    t = np.linspace(0.0, 1.0, max(horizon, 1))[:, None]
    sky_top = np.array([0.45, 0.62, 0.85]) + rng.uniform(-0.05, 0.05, 3)
    sky_bottom = np.array([0.78, 0.86, 0.93])
    img[:horizon] = (sky_top * (1 - t) + sky_bottom * t)[:, None, :]
    road_rows = h - horizon
    t = np.linspace(0.0, 1.0, road_rows)[:, None]
    base = 0.42 + float(rng.uniform(-0.05, 0.05))
    grey = base - 0.12 * t
    img[horizon:] = np.repeat(grey, 3, axis=1)[:, None, :]
    # dashed centre line
    lane_x = w // 2 + int(rng.integers(-w // 8, w // 8 + 1))
    dash = max(h // 16, 2)
    for y in range(horizon + 1, h, 2 * dash):
        img[y:y + dash, max(lane_x - 1, 0):lane_x + 1] = 0.92
    return img


def _plain_background(w: int, h: int, rng: np.random.Generator) -> np.ndarray:
    return np.full((h, w, 3), 0.5 + float(rng.uniform(-0.1, 0.1)))


BACKGROUNDS = {"road": _road_background, "plain": _plain_background}


def render_scene(spec: SceneSpec, dims: tuple[int, int], max_tries: int = 2000) -> tuple[np.ndarray, SceneGroundTruth]:
    """Draw ``spec.car_count`` non-overlapping cars on a background."""
    w, h = dims
    gw, gh = spec.glyph_size
    rng = _rng(spec.seed)
    img = BACKGROUNDS[spec.background](w, h, rng)
    if spec.car_count and (gw > w or gh > h):
        raise PlacementFailure(f"{gw}x{gh} car does not fit in {w}x{h} image")
    # cars sit on the road when there is room below the horizon
    y_lo = h // 3 if spec.background == "road" and h - h // 3 >= gh else 0
    gap = 2
    boxes: list[tuple[int, int, int, int]] = []
    tries = 0
    while len(boxes) < spec.car_count:
        if tries >= max_tries:
            raise PlacementFailure(f"placed {len(boxes)} of {spec.car_count} cars in {max_tries} attempts")
        tries += 1
        x = int(rng.integers(0, w - gw + 1))
        y = int(rng.integers(y_lo, h - gh + 1))
        if all(x + gw + gap <= bx or bx + bw + gap <= x or y + gh + gap <= by or by + bh + gap <= y
               for bx, by, bw, bh in boxes):
            boxes.append((x, y, gw, gh))
    glyph = car_glyph(gw, gh)
    for x, y, bw, bh in boxes:
        img[y:y + bh, x:x + bw] = glyph
    boxes.sort(key=lambda b: (b[1], b[0]))
    gt = SceneGroundTruth(boxes=tuple(boxes), labels=("car",) * len(boxes))
    return np.clip(img, 0.0, 1.0).astype(np.float32), gt


def droplet_seed(seed: int, index: int) -> int:
    """Per-pair droplet seed, independent of the scene seed ``seed ^ index``."""
    ss = np.random.SeedSequence([int(seed) & U64, int(index), 0xD809])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, int] = (64, 64)
    density: float = DEFAULT_DENSITY
    max_cars: int = 3
    min_cars: int = 1
    background: str = "road"
    glyph_size: tuple[int, int] = GLYPH_SIZE
    params: CorruptionParams = field(default_factory=CorruptionParams)


def synthesize_pair(index: int, seed: int, cfg: SynthConfig) -> tuple[AlignedPair, SceneGroundTruth, DropletField]:
    scene_seed = (int(seed) ^ int(index)) & U64
    count = int(_rng(scene_seed).integers(cfg.min_cars, cfg.max_cars + 1))
    clear, gt = render_scene(SceneSpec(count, cfg.background, scene_seed, cfg.glyph_size), cfg.dims)
    # snap to the 8-bit storage grid so in-memory and on-disk datasets agree
    clear = quantize(clear)
    fld = sample_droplet_field(cfg.dims, cfg.density, droplet_seed(seed, index), cfg.params)
    distorted = quantize(apply_corruption(clear, fld))
    return AlignedPair(distorted=distorted, clear=clear, id=f"{index:06d}"), gt, fld


def synthesize_dataset(
    n_pairs: int,
    dims: tuple[int, int] = (64, 64),
    density: float = DEFAULT_DENSITY,
    seed: int = 0,
    config: SynthConfig | None = None,
) -> list[tuple[AlignedPair, SceneGroundTruth]]:
    """Deterministically generate ``n_pairs`` (pair, ground truth) items."""
    if n_pairs < 0:
        raise ValueError("n_pairs must be non-negative")
    cfg = replace(config or SynthConfig(), dims=tuple(dims), density=density)
    out = []
    for i in range(n_pairs):
        pair, gt, _ = synthesize_pair(i, seed, cfg)
        out.append((pair, gt))
    return out
