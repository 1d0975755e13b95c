"""Procedural Drive360-shaped data: a simulated vehicle plus a tiny renderer.

Every chapter is simulated from its own seeded generator, so chapters can be
produced in any order (or in parallel) and still be bit-identical.

Seg classes follow the Cityscapes train ids, with id 19 re-used for lane
markings so that masks span exactly 20 classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..trajectory import KinematicsConfig, integrate_path
from .records import FPS, N_FOLDERS, N_SEMANTIC, maneuver_tag, speed_zone_tag

ROAD, SIDEWALK, BUILDING, WALL, FENCE, POLE, LIGHT, SIGN = range(8)
VEGETATION, TERRAIN, SKY, PERSON, RIDER, CAR, TRUCK, BUS = range(8, 16)
TRAIN, MOTORCYCLE, BICYCLE, MARKING = range(16, 20)

PALETTE = np.array(
    [
        (128, 64, 128),
        (244, 35, 232),
        (70, 70, 70),
        (102, 102, 156),
        (190, 153, 153),
        (153, 153, 153),
        (250, 170, 30),
        (220, 220, 0),
        (107, 142, 35),
        (152, 251, 152),
        (70, 130, 180),
        (220, 20, 60),
        (255, 0, 0),
        (0, 0, 142),
        (0, 0, 70),
        (0, 60, 100),
        (0, 80, 100),
        (0, 0, 230),
        (119, 11, 32),
        (255, 255, 255),
    ],
    dtype=np.float64,
) / 255.0

ZONE_LIMITS = (30.0, 50.0, 80.0)
EVENT_RANGE_M = 500.0
TAG_RANGE_M = 30.0
# metres of route drawn on the map image
MAP_EXTENT_M = 120.0


@dataclass(frozen=True)
class SimParams:
    max_angle_step: float = 5.0
    turn_scale_deg: float = 35.0
    kin_gain: float = 0.6
    missing_rate: float = 0.03
    pixel_noise: float = 0.02


@dataclass
class ChapterSim:
    angle: np.ndarray
    speed: np.ndarray
    speed_limit: np.ndarray
    odometer: np.ndarray
    semantic: np.ndarray  # (n, 20), missing entries already zero
    missing: np.ndarray  # (n, 20) bool
    tags: list
    car_depth: np.ndarray  # NaN when no lead vehicle
    car_offset: np.ndarray
    dist_signal: np.ndarray
    dist_ped: np.ndarray
    dist_yield: np.ndarray
    xy: np.ndarray  # (n + extra, 2) dead-reckoned path, metres
    heading: np.ndarray
    brightness: float
    lateral: np.ndarray


def route_profile(seed: int, route_idx: int) -> dict:
    rng = np.random.default_rng([seed, route_idx, 0xA11])
    weights = rng.dirichlet(np.ones(3) * 1.5)
    return {
        "lat0": 46.0 + rng.uniform(0.0, 1.5),
        "lon0": 6.5 + rng.uniform(0.0, 3.0),
        "zone_weights": weights,
        "speed_factor": rng.uniform(0.85, 1.0),
        "folder": route_idx % N_FOLDERS,
        "brightness": rng.uniform(0.85, 1.1),
        "elevation": rng.uniform(300.0, 1200.0),
    }


def _segments(rng, n, lo, hi):
    """Yield (start, stop) pairs covering range(n) with random lengths."""
    i = 0
    while i < n:
        j = min(n, i + int(rng.integers(lo, hi)))
        yield i, j
        i = j


def _angle_series(rng, n, p: SimParams) -> np.ndarray:
    target = np.zeros(n)
    turning = rng.random() < 0.4
    for a, b in _segments(rng, n, 20, 90):
        if turning:
            # exponential truncated at 170 deg by inverse CDF, so no mass piles up at the cap
            tail = 1.0 - math.exp(-170.0 / p.turn_scale_deg)
            amp = -p.turn_scale_deg * math.log1p(-rng.random() * tail)
            target[a:b] = amp * rng.choice((-1.0, 1.0))
        turning = not turning if rng.random() < 0.8 else turning
    # slow wobble around the target: AR(1), ~1.5 deg
    eps = rng.normal(0.0, 0.35, n)
    wobble = np.zeros(n)
    for i in range(1, n):
        wobble[i] = 0.95 * wobble[i - 1] + eps[i]
    desired = target + wobble
    angle = np.zeros(n)
    angle[0] = np.clip(desired[0], -20.0, 20.0)
    for i in range(1, n):
        step = np.clip(desired[i] - angle[i - 1], -p.max_angle_step, p.max_angle_step)
        angle[i] = angle[i - 1] + step
    return np.clip(angle, -180.0, 180.0)


def _zone_series(rng, n, weights) -> np.ndarray:
    limit = np.empty(n)
    for a, b in _segments(rng, n, 150, 900):
        limit[a:b] = ZONE_LIMITS[rng.choice(3, p=weights)]
    return limit


def _event_positions(rng, length_m, mean_gap):
    pos, out = rng.uniform(20.0, mean_gap), []
    while pos < length_m:
        out.append(pos)
        pos += rng.exponential(mean_gap) + 25.0
    return np.array(out)


def _next_distance(events, odo):
    """Distance from each odometer reading to the next event ahead (inf if none)."""
    if len(events) == 0:
        return np.full_like(odo, np.inf)
    idx = np.searchsorted(events, odo, side="left")
    out = np.full_like(odo, np.inf)
    ok = idx < len(events)
    out[ok] = events[idx[ok]] - odo[ok]
    return out


def simulate_chapter(seed, route_idx, chapter_idx, n, profile, p: SimParams) -> ChapterSim:
    rng = np.random.default_rng([seed, route_idx, chapter_idx])
    dt = 1.0 / FPS
    extra = 200  # look-ahead frames for the map view
    total = n + extra

    angle = _angle_series(rng, total, p)
    limit = _zone_series(rng, total, profile["zone_weights"])

    max_len = total * dt * 160.0 / 3.6 + EVENT_RANGE_M
    urban = (limit == 30.0).mean()
    signals = _event_positions(rng, max_len, 300.0 - 150.0 * urban)
    peds = _event_positions(rng, max_len, 350.0 - 200.0 * urban)
    yields = _event_positions(rng, max_len, 400.0)
    inters = np.sort(np.concatenate([signals, yields, _event_positions(rng, max_len, 250.0)]))

    speed = np.zeros(total)
    odo = np.zeros(total)
    v = limit[0] * profile["speed_factor"] * rng.uniform(0.7, 1.0)
    noise = rng.normal(0.0, 0.15, total)
    for i in range(total):
        d_sig = _next_distance(signals, np.array([odo[i]]))[0]
        d_ped = _next_distance(peds, np.array([odo[i]]))[0]
        target = limit[i] * profile["speed_factor"] * (1.0 - 0.45 * min(abs(angle[i]) / 90.0, 1.0))
        if d_sig < 40.0 or d_ped < 40.0:
            target *= 0.6
        v += float(np.clip(0.04 * (target - v), -0.8, 0.8)) + noise[i]
        v = float(np.clip(v, 0.0, 160.0))
        speed[i] = v
        if i + 1 < total:
            odo[i + 1] = odo[i] + v / 3.6 * dt

    d_sig = _next_distance(signals, odo)
    d_ped = _next_distance(peds, odo)
    d_yld = _next_distance(yields, odo)
    d_int = _next_distance(inters, odo)

    kin = KinematicsConfig(dt=dt, gain_k=p.kin_gain, initial_heading=rng.uniform(-math.pi, math.pi))
    path = integrate_path(angle, speed, kin)
    xy, heading = path.points[:-1], path.headings[:-1]

    # lead vehicle: present on random segments, depth in (0.1, 0.5) of the road height
    car_depth = np.full(total, np.nan)
    car_offset = np.zeros(total)
    for a, b in _segments(rng, total, 40, 200):
        if rng.random() < 0.35:
            d0, d1 = rng.uniform(0.15, 0.5, 2)
            car_depth[a:b] = np.linspace(d0, d1, b - a)
            car_offset[a:b] = rng.uniform(-0.15, 0.15)

    lateral = np.zeros(total)
    lat_eps = rng.normal(0.0, 0.004, total)
    for i in range(1, total):
        lateral[i] = 0.97 * lateral[i - 1] + lat_eps[i]

    sem = np.zeros((total, N_SEMANTIC))
    lat0, lon0 = profile["lat0"], profile["lon0"]
    sem[:, 0] = lat0 + xy[:, 1] / 111_111.0
    sem[:, 1] = lon0 + xy[:, 0] / (111_111.0 * math.cos(math.radians(lat0)))
    sem[:, 2] = limit
    sem[:, 3] = limit * 0.9 + rng.normal(0.0, 2.0, total)
    sem[:, 4] = np.degrees(heading) % 360.0
    sem[:, 5] = np.where(d_int < 25.0, rng.integers(0, 4, total), 0)
    sem[:, 6] = d_sig
    sem[:, 7] = d_yld
    sem[:, 8] = d_ped
    sem[:, 9] = d_int
    # look-ahead curvature hints: the routing provider knows the road ahead
    ahead1 = np.concatenate([angle[5:], np.repeat(angle[-1], 5)])
    ahead2 = np.concatenate([angle[20:], np.repeat(angle[-1], 20)])
    sem[:, 10] = ahead1 + rng.normal(0.0, 4.0, total)
    sem[:, 11] = ahead2 + rng.normal(0.0, 8.0, total)
    sem[:, 12] = np.choose((limit > 40).astype(int) + (limit > 60).astype(int), (6.0, 7.5, 10.0))
    sem[:, 13] = np.choose((limit > 40).astype(int) + (limit > 60).astype(int), (1, 2, 2))
    elev = profile["elevation"] + np.cumsum(rng.normal(0.0, 0.02, total))
    sem[:, 14] = elev
    sem[:, 15] = np.gradient(elev) * 100.0
    sem[:, 16] = np.clip((80.0 - limit) / 50.0 + rng.normal(0, 0.05, total), 0, 1)
    sem[:, 17] = rng.uniform(1.0, 6.0, total)
    sem[:, 18] = 0.3 * speed + rng.normal(0.0, 8.0, total)
    sem[:, 19] = rng.normal(0.0, 1.0, total)

    missing = rng.random((total, N_SEMANTIC)) < p.missing_rate
    missing[:, 2] = False
    for col in (6, 7, 8, 9):
        missing[:, col] |= sem[:, col] > EVENT_RANGE_M
    sem[missing] = 0.0

    tags = []
    for i in range(n):
        t = {speed_zone_tag(limit[i]), maneuver_tag(angle[i])}
        if d_ped[i] < TAG_RANGE_M:
            t.add("Pedestrian")
        if d_sig[i] < TAG_RANGE_M:
            t.add("Traffic Light")
        if d_yld[i] < TAG_RANGE_M:
            t.add("Yield")
        tags.append(frozenset(t))

    return ChapterSim(
        angle=angle[:n],
        speed=speed[:n],
        speed_limit=limit[:n],
        odometer=odo,
        semantic=sem[:n],
        missing=missing[:n],
        tags=tags,
        car_depth=car_depth[:n],
        car_offset=car_offset[:n],
        dist_signal=d_sig[:n],
        dist_ped=d_ped[:n],
        dist_yield=d_yld[:n],
        xy=xy,
        heading=heading,
        brightness=profile["brightness"],
        lateral=lateral[:n],
    )


class FrameRenderer:
    """Renders the front camera view and its exact label mask."""

    def __init__(self, width: int, height: int):
        self.w, self.h = width, height
        self.horizon = int(round(0.42 * height))
        rows = np.arange(height, dtype=np.float64)
        # depth parameter: 0 at the horizon, 1 at the bottom row
        self.s = np.clip((rows - self.horizon + 0.5) / (height - self.horizon), 0.0, 1.0)[:, None]
        self.x = (np.arange(width, dtype=np.float64) + 0.5)[None, :]
        self.rows = rows[:, None]

    def render(self, sim: ChapterSim, i: int, rng) -> tuple:
        w, h, s, x = self.w, self.h, self.s, self.x
        limit = sim.speed_limit[i]
        angle = sim.angle[i]
        ground = self.rows >= self.horizon

        mask = np.full((h, w), SKY, dtype=np.uint8)
        if limit <= 30:
            side, road_w = BUILDING, 0.42
        elif limit <= 50:
            side, road_w = VEGETATION, 0.5
        else:
            side, road_w = TERRAIN, 0.62
        mask[np.broadcast_to(ground, mask.shape)] = side if side != BUILDING else SIDEWALK

        bend = np.clip(angle / 60.0, -2.0, 2.0) * 0.9
        cx = w * (0.5 + sim.lateral[i] + bend * (1.0 - s) ** 2 * 0.5)
        half = w * road_w * 0.5 * (0.08 + 0.92 * s)
        dx = np.abs(x - cx)
        road = ground & (dx < half)
        mask[road] = ROAD

        if limit <= 30:
            # building facades above the horizon on both sides
            facade = (self.rows < self.horizon) & (self.rows > self.horizon * 0.25) & (
                np.abs(x - w * 0.5 - bend * w * 0.2) > w * 0.22
            )
            mask[facade] = BUILDING
        elif limit <= 50:
            tree = (self.rows < self.horizon) & (self.rows > self.horizon * 0.55) & (
                np.abs(x - w * 0.5 - bend * w * 0.2) > w * 0.3
            )
            mask[tree] = VEGETATION

        # dashed centre line; dash phase follows the odometer so motion is visible
        depth_m = 4.0 / np.maximum(s, 1e-3)
        dash = ((depth_m + sim.odometer[i]) % 6.0) < 3.0
        line = road & (dx < np.maximum(0.6, w * 0.012 * s)) & dash & (s > 0.05)
        mask[line] = MARKING

        if not np.isnan(sim.car_depth[i]):
            cs = sim.car_depth[i]
            row = self.horizon + cs * (h - self.horizon)
            ccx = w * (0.5 + sim.lateral[i] + bend * (1.0 - cs) ** 2 * 0.5 + sim.car_offset[i] * cs)
            cw = w * 0.16 * cs + 1.0
            chh = h * 0.22 * cs + 1.0
            car = (np.abs(x - ccx) < cw) & (self.rows <= row) & (self.rows > row - chh)
            mask[car] = CAR

        d_sig = sim.dist_signal[i]
        if d_sig < 80.0:
            ps = float(np.clip(6.0 / max(d_sig, 1.0), 0.05, 1.0))
            base = self.horizon + ps * (h - self.horizon)
            px = w * (0.5 + road_w * 0.5 * (0.08 + 0.92 * ps) + 0.03)
            pole = (np.abs(x - px) < max(0.6, 0.01 * w * ps + 0.4)) & (self.rows <= base) & (
                self.rows > base - h * 0.5 * ps - 2
            )
            mask[pole] = POLE
            lamp = (np.abs(x - px) < max(1.0, 0.02 * w * ps + 0.5)) & (
                np.abs(self.rows - (base - h * 0.5 * ps - 2)) < max(1.0, 0.04 * h * ps)
            )
            mask[lamp] = LIGHT

        d_ped = sim.dist_ped[i]
        if d_ped < 60.0:
            ps = float(np.clip(6.0 / max(d_ped, 1.0), 0.05, 1.0))
            row = self.horizon + ps * (h - self.horizon)
            band = road & (np.abs(self.rows - row) < max(0.6, 0.05 * h * ps)) & (((x - cx) / max(1.0, w * 0.02)).astype(int) % 2 == 0)
            mask[band] = MARKING
            px = w * (0.5 - road_w * 0.5 * (0.08 + 0.92 * ps) - 0.02)
            person = (np.abs(x - px) < max(0.6, 0.015 * w * ps + 0.3)) & (self.rows <= row) & (
                self.rows > row - h * 0.2 * ps - 1
            )
            mask[person] = PERSON

        d_yld = sim.dist_yield[i]
        if d_yld < 60.0:
            ps = float(np.clip(6.0 / max(d_yld, 1.0), 0.05, 1.0))
            base = self.horizon + ps * (h - self.horizon)
            px = w * (0.5 + road_w * 0.5 * (0.08 + 0.92 * ps) + 0.06)
            sign = (np.abs(x - px) < max(1.0, 0.025 * w * ps + 0.5)) & (
                np.abs(self.rows - (base - h * 0.25 * ps)) < max(1.0, 0.03 * h * ps + 0.5)
            )
            mask[sign] = SIGN

        shade = np.where(ground, 0.65 + 0.35 * s, 1.0)
        img = PALETTE[mask] * (shade * sim.brightness)[:, :, None]
        img = img + rng.normal(0.0, 0.02, img.shape)
        return np.clip(img, 0.0, 1.0), mask


def render_map(sim: ChapterSim, i: int, width: int, height: int) -> np.ndarray:
    """Top-down route view in the ego frame: vehicle at bottom centre, heading up."""
    limit = sim.speed_limit[i]
    bg = {30.0: (0.93, 0.91, 0.86), 50.0: (0.88, 0.94, 0.85)}.get(limit, (0.85, 0.9, 0.95))
    img = np.empty((height, width, 3))
    img[:] = bg
    n_ahead = int(MAP_EXTENT_M / max(sim.speed[i] / 3.6 * 0.1, 0.05))
    pts = sim.xy[i : i + max(2, min(n_ahead, len(sim.xy) - i))] - sim.xy[i]
    th = sim.heading[i]
    fwd = pts[:, 0] * math.cos(th) + pts[:, 1] * math.sin(th)
    # left of travel direction is +y in the world frame, drawn to the left on screen
    left = -pts[:, 0] * math.sin(th) + pts[:, 1] * math.cos(th)
    scale = height * 0.9 / MAP_EXTENT_M
    col = width / 2.0 - left * scale
    row = height - 1.0 - fwd * scale
    yy, xx = np.mgrid[0:height, 0:width]
    # dense resample of the polyline, then stamp a disc of radius r
    if len(col) > 1:
        seg = np.hypot(np.diff(col), np.diff(row))
        t = np.concatenate([[0.0], np.cumsum(seg)])
        tt = np.arange(0.0, t[-1] + 1e-9, 0.5)
        col = np.interp(tt, t, col)
        row = np.interp(tt, t, row)
    r = max(1.0, width / 80.0)
    keep = (col > -r) & (col < width + r) & (row > -r) & (row < height + r)
    col, row = col[keep], row[keep]
    route = np.zeros((height, width), dtype=bool)
    for c, rr in zip(col, row):
        c0, c1 = int(max(0, c - r - 1)), int(min(width, c + r + 2))
        r0, r1 = int(max(0, rr - r - 1)), int(min(height, rr + r + 2))
        if c0 >= c1 or r0 >= r1:
            continue
        sub = (xx[r0:r1, c0:c1] - c) ** 2 + (yy[r0:r1, c0:c1] - rr) ** 2 <= r * r
        route[r0:r1, c0:c1] |= sub
    img[route] = (0.15, 0.35, 0.85)
    return img
