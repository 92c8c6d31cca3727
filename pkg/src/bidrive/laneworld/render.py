"""Deterministic top-down RGB rendering of the world.

A static road raster (0.5 m/px) is built once per layout; each frame samples
it through an ego-centric rotation (heading points up, ego near the bottom)
and stamps dynamic elements on top: route breadcrumbs up to the next
intersection, traffic-light discs at stop lines, vehicles, pedestrians, and
the ego. A weather tag applies a deterministic palette shift and, for the
rainy tags, seeded pixel noise.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import torch

from .layout import Layout
from .world import World, light_is_green, ScenarioError, WEATHER_TAGS

METERS_PER_PIXEL = 0.5

COLOR_GRASS = np.array([62, 108, 62], dtype=np.float64)
COLOR_ROAD = np.array([78, 78, 84], dtype=np.float64)
COLOR_CENTERLINE = np.array([205, 185, 70], dtype=np.float64)
COLOR_ROUTE = np.array([95, 165, 255], dtype=np.float64)
COLOR_RED = np.array([235, 45, 45], dtype=np.float64)
COLOR_GREEN = np.array([45, 230, 80], dtype=np.float64)
COLOR_VEHICLE = np.array([228, 228, 238], dtype=np.float64)
COLOR_PED = np.array([250, 210, 55], dtype=np.float64)
COLOR_EGO = np.array([40, 70, 210], dtype=np.float64)

ROAD_HALF_WIDTH = 4.6   # m painted road band per edge (two lanes)

# channel multipliers and additive-noise sigma per weather tag
WEATHER_PALETTE = {
    "clear": (np.array([1.0, 1.0, 1.0]), 0.0),
    "sunset": (np.array([1.12, 0.90, 0.70]), 0.0),
    "rain": (np.array([0.62, 0.64, 0.70]), 9.0),
    "wet_sunset": (np.array([0.80, 0.66, 0.55]), 7.0),
}
assert set(WEATHER_PALETTE) == set(WEATHER_TAGS)


@lru_cache(maxsize=8)
def _static_raster(layout_id: str) -> tuple[np.ndarray, float, float]:
    """Road/markings raster for a builtin layout; returns (img, x0, y0)."""
    from .layout import builtin_layout

    layout = builtin_layout(layout_id)
    x0, y0, x1, y1 = layout.bounds()
    w = int(math.ceil((x1 - x0) / METERS_PER_PIXEL))
    h = int(math.ceil((y1 - y0) / METERS_PER_PIXEL))
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = COLOR_GRASS

    def to_px(p):
        col = int(round((p[0] - x0) / METERS_PER_PIXEL))
        row = int(round((p[1] - y0) / METERS_PER_PIXEL))
        return row, col

    def stamp_disc(p, radius_px, color):
        row, col = to_px(p)
        r = int(math.ceil(radius_px))
        for dr in range(-r, r + 1):
            for dc in range(-r, r + 1):
                if dr * dr + dc * dc <= radius_px * radius_px:
                    rr, cc = row + dr, col + dc
                    if 0 <= rr < h and 0 <= cc < w:
                        img[rr, cc] = color

    road_r = ROAD_HALF_WIDTH / METERS_PER_PIXEL
    for a, b in layout.edges:
        pa, pb = layout.nodes[a].pos, layout.nodes[b].pos
        length = np.linalg.norm(pb - pa)
        n = int(length / (METERS_PER_PIXEL * 0.8)) + 1
        for t in np.linspace(0.0, 1.0, n):
            stamp_disc(pa * (1 - t) + pb * t, road_r, COLOR_ROAD)
    # Dashed center line along each road axis: 2 m on, 2 m off.
    for a, b in layout.edges:
        pa, pb = layout.nodes[a].pos, layout.nodes[b].pos
        length = float(np.linalg.norm(pb - pa))
        u = (pb - pa) / length
        s = 8.0
        while s < length - 8.0:
            if int(s / 2.0) % 2 == 0:
                stamp_disc(pa + u * s, 0.9, COLOR_CENTERLINE)
            s += METERS_PER_PIXEL
    return img, x0, y0


@lru_cache(maxsize=8)
def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    half = size / 2.0
    rows, cols = np.mgrid[0:size, 0:size]
    x_view = (cols - half + 0.5) * METERS_PER_PIXEL
    y_view = (half - rows - 0.5) * METERS_PER_PIXEL
    return x_view, y_view


def render(world: World) -> np.ndarray:
    """Render the current world state to a (size, size, 3) uint8 frame."""
    size = world.cfg.frame_size
    static, x0, y0 = _static_raster(world.cfg.layout_id)
    h, w, _ = static.shape

    heading = world.ego.heading
    fwd = np.array([math.cos(heading), math.sin(heading)])
    right = np.array([math.sin(heading), -math.cos(heading)])
    view_ahead = size * METERS_PER_PIXEL * 0.3
    center = world.ego.pos + fwd * view_ahead

    x_view, y_view = _pixel_grid(size)
    wx = center[0] + x_view * right[0] + y_view * fwd[0]
    wy = center[1] + x_view * right[1] + y_view * fwd[1]
    ci = np.clip(((wx - x0) / METERS_PER_PIXEL).round().astype(int), 0, w - 1)
    ri = np.clip(((wy - y0) / METERS_PER_PIXEL).round().astype(int), 0, h - 1)
    img = static[ri, ci].copy()

    def world_to_px(p) -> tuple[int, int]:
        rel = np.asarray(p) - center
        xv = float(rel @ right)
        yv = float(rel @ fwd)
        col = int(round(xv / METERS_PER_PIXEL + size / 2.0 - 0.5))
        row = int(round(size / 2.0 - 0.5 - yv / METERS_PER_PIXEL))
        return row, col

    def stamp(p, radius_px, color):
        row, col = world_to_px(p)
        r = int(math.ceil(radius_px))
        if row < -r or row >= size + r or col < -r or col >= size + r:
            return
        for dr in range(-r, r + 1):
            for dc in range(-r, r + 1):
                if dr * dr + dc * dc <= radius_px * radius_px:
                    rr, cc = row + dr, col + dc
                    if 0 <= rr < size and 0 <= cc < size:
                        img[rr, cc] = color

    # Route breadcrumbs from current progress up to the next intersection
    # entry (turns themselves are conveyed by the navigation command).
    s = world.distance_completed
    s_limit = world.route.total_length
    for inter in world.route.intersections:
        if inter.s_entry > s:
            s_limit = inter.s_entry
            break
    mark = s
    while mark <= min(s + 30.0, s_limit):
        stamp(world.route.point_at(mark), 1.0, COLOR_ROUTE)
        mark += 2.0

    # Traffic lights: one disc per approach lane ending at a lit node.
    view_radius = size * METERS_PER_PIXEL * 0.8
    for (a, b), lane in sorted(world.layout.lanes.items()):
        if b not in world.layout.lights:
            continue
        p = lane.points[-1]
        if np.linalg.norm(p - world.ego.pos) > view_radius:
            continue
        color = COLOR_GREEN if light_is_green(lane.axis, world.tick) else COLOR_RED
        stamp(p + np.array([lane.direction[1], -lane.direction[0]]) * 1.6, 2.0, color)

    def stamp_vehicle(pos, heading_v, color):
        f = np.array([math.cos(heading_v), math.sin(heading_v)])
        r = np.array([f[1], -f[0]])
        for du in np.arange(-2.2, 2.21, 0.4):
            for dv in np.arange(-1.0, 1.01, 0.4):
                stamp(pos + f * du + r * dv, 0.6, color)

    for veh in world.vehicles:
        stamp_vehicle(veh.pos, veh.heading, COLOR_VEHICLE)
    for ped in world.pedestrians:
        stamp(ped.pos, 1.5, COLOR_PED)
    stamp_vehicle(world.ego.pos, world.ego.heading, COLOR_EGO)

    img = apply_weather(img, world.cfg.weather, world.seed, world.tick)
    return img.astype(np.uint8)


def apply_weather(img: np.ndarray, tag: str, seed: int, tick: int) -> np.ndarray:
    """Deterministic palette shift + seeded noise; returns float64 in [0, 255]."""
    try:
        mult, sigma = WEATHER_PALETTE[tag]
    except KeyError:
        raise ScenarioError(f"unknown weather {tag!r}") from None
    out = img * mult
    if sigma > 0:
        rng = np.random.default_rng((int(seed) * 1_000_003 + int(tick)) % 2**63)
        out = out + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(out, 0.0, 255.0)


def frame_to_tensor(frame: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float32 (3, H, W) in [0, 1]."""
    return torch.from_numpy(frame.astype(np.float32) / 255.0).permute(2, 0, 1)
