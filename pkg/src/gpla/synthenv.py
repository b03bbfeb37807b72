"""Synthetic language-annotated block-pushing episodes.

A flat 2D board in [-1, 1]^2 (y up) holds 4-8 uniquely coloured/shaped
blocks. A scripted point pusher rearranges them toward a task-family goal
using approach-then-push segments; each segment is captioned with a templated
low-level instruction. Frames are rendered top-down to small RGB rasters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError

SHAPES = ("circle", "star", "hexagon", "heart", "cube", "triangle", "square", "moon")
COLORS = ("red", "green", "blue", "yellow")
COLOR_RGB = {
    "red": (0.86, 0.16, 0.14),
    "green": (0.18, 0.68, 0.22),
    "blue": (0.14, 0.32, 0.90),
    "yellow": (0.96, 0.84, 0.10),
}
TABLE_RGB = (0.52, 0.48, 0.42)
EFFECTOR_RGB = (0.05, 0.05, 0.05)

TASK_FAMILIES = {
    "line_vertical": "put all the blocks in a vertical line",
    "line_horizontal": "put all the blocks in a horizontal line on the bottom of the board",
    "corner_gather": "put all the blocks in the bottom left corner",
    "center_gather": "put all the blocks in the center of the board",
    "shape_parallelogram": "make a 'parallelogram' shape out of all the blocks",
}

RELATIONS = ("near to", "above", "below", "left of", "right of", "diagonal to")
REGIONS = ("top", "bottom", "left", "right", "top left corner", "top right corner",
           "bottom left corner", "bottom right corner", "center")

BLOCK_RADIUS = 0.06
EFFECTOR_RADIUS = 0.03
DELTA_MAX = 0.2
HORIZON = 8
FORMAT_VERSION = 1

# corner_gather boards are capped: more than six blocks of this radius do not
# fit within the 0.35 corner neighbourhood
CORNER_CAPACITY = 6


@dataclass(frozen=True)
class Block:
    shape: str
    color: str
    position: tuple[float, float]
    radius: float = BLOCK_RADIUS

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class BoardState:
    blocks: tuple[Block, ...]
    effector: tuple[float, float]

    def positions(self) -> np.ndarray:
        return np.array([b.position for b in self.blocks], dtype=np.float64)

    def find(self, color: str, shape: str) -> Block | None:
        for b in self.blocks:
            if b.color == color and b.shape == shape:
                return b
        return None


@dataclass(frozen=True)
class Observation:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    effector_state: np.ndarray  # (2,)


@dataclass(frozen=True)
class ActionChunk:
    deltas: np.ndarray  # horizon x 2

    @property
    def horizon(self) -> int:
        return self.deltas.shape[0]


@dataclass(frozen=True)
class Segment:
    start: int
    end: int
    low_level: str


@dataclass
class Episode:
    episode_id: int
    seed: int
    task_family: str
    high_level: str
    frames: list[BoardState]
    actions: np.ndarray  # T x 2
    segments: list[Segment]
    images: np.ndarray | None = None  # (T+1) x H x W x 3 uint8, filled by render_episode / load

    def __len__(self) -> int:
        return len(self.actions)

    def segment_at(self, t: int) -> Segment:
        for seg in self.segments:
            if seg.start <= t < seg.end:
                return seg
        raise IndexError(f"step {t} outside episode of length {len(self)}")


@dataclass(frozen=True)
class Sample:
    observation: Observation
    high_level: str
    low_level: str
    chunk: ActionChunk
    episode_id: int = -1
    step: int = -1


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
    """Membership test in block-local coordinates scaled so the block radius is 1."""
    if shape == "circle":
        return lx * lx + ly * ly <= 1.0
    if shape in ("square", "cube"):
        return np.maximum(np.abs(lx), np.abs(ly)) <= 0.82
    if shape == "triangle":
        return (ly >= -0.6) & (ly <= 1.0 - 1.73 * np.abs(lx))
    if shape == "hexagon":
        ax, ay = np.abs(lx), np.abs(ly)
        return np.maximum(ax * 0.866 + ay * 0.5, ay) <= 0.9
    if shape == "star":
        r = np.hypot(lx, ly)
        th = np.arctan2(ly, lx) - math.pi / 2
        return r <= 0.55 + 0.45 * np.cos(5 * th) ** 4
    if shape == "heart":
        x, y = lx * 1.15, ly * 1.15 + 0.2
        return (x * x + y * y - 1) ** 3 - x * x * y ** 3 <= 0
    if shape == "moon":
        return (lx * lx + ly * ly <= 1.0) & ((lx - 0.55) ** 2 + ly * ly > 0.7)
    raise ConfigError(f"unknown shape {shape!r}")


def _window(coords: np.ndarray, centre: float, half: float) -> slice:
    lo, hi = np.searchsorted(coords, [centre - half, centre + half])
    return slice(int(lo), int(hi))


def render(state: BoardState, size: int = 64, supersample: int = 2) -> np.ndarray:
    """Top-down raster of ``state`` as uint8 (size, size, 3); row 0 is y = +1."""
    n = size * supersample
    coords = (np.arange(n) + 0.5) * (2.0 / n) - 1.0
    img = np.empty((n, n, 3), dtype=np.float32)
    img[:] = TABLE_RGB
    # each shape test only runs on the pixel window around its object;
    # rows run top-down so the row axis uses the negated coordinate
    for b in state.blocks:
        bx, by = b.position
        cols = _window(coords, bx, 1.25 * b.radius)
        rows = _window(coords, -by, 1.25 * b.radius)
        lx = (coords[None, cols] - bx) / b.radius
        ly = (-coords[rows, None] - by) / b.radius
        lx, ly = np.broadcast_arrays(lx, ly)
        m = _shape_mask(b.shape, lx, ly)
        sub = img[rows, cols]
        sub[m] = COLOR_RGB[b.color]
        if b.shape == "cube":
            # shaded face marks the cube apart from the flat square
            face = m & (lx + ly > 0.3)
            sub[face] = np.asarray(COLOR_RGB[b.color]) * 0.6
    ex, ey = state.effector
    er = EFFECTOR_RADIUS * 1.6
    cols, rows = _window(coords, ex, 1.25 * er), _window(coords, -ey, 1.25 * er)
    em = (coords[None, cols] - ex) ** 2 + (-coords[rows, None] - ey) ** 2 <= er ** 2
    img[rows, cols][em] = EFFECTOR_RGB
    img = img.reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def render_episode(episode: Episode, size: int = 64) -> np.ndarray:
    if episode.images is None or episode.images.shape[1] != size:
        episode.images = np.stack([render(f, size) for f in episode.frames])
    return episode.images


# ---------------------------------------------------------------------------
# scripted episodes


@dataclass(frozen=True)
class SynthConfig:
    min_blocks: int = 4
    max_blocks: int = 8
    block_radius: float = BLOCK_RADIUS
    delta_max: float = DELTA_MAX
    gain: float = 0.5
    goal_tolerance: float = 0.04
    max_passes: int = 3
    image_size: int = 64


def _goal_slots(family: str, n: int, r: float, rng: np.random.Generator) -> np.ndarray:
    gap = 2 * r + 0.025
    if family == "line_vertical":
        x = rng.uniform(-0.4, 0.4)
        ys = (np.arange(n) - (n - 1) / 2) * max(gap, min(0.22, 1.6 / n))
        return np.stack([np.full(n, x), ys], axis=1)
    if family == "line_horizontal":
        y = rng.uniform(-0.75, -0.55)
        xs = (np.arange(n) - (n - 1) / 2) * max(gap, min(0.22, 1.6 / n))
        return np.stack([xs, np.full(n, y)], axis=1)
    if family == "corner_gather":
        # hexagonal packing into the bottom-left corner, closest slots first
        gap = 2 * r + 0.008
        base = -1.0 + r + 0.003
        row_h = gap * math.sqrt(3) / 2
        cands = []
        for k in range(4):
            for i in range(4):
                x = base + i * gap + (gap / 2 if k % 2 else 0.0)
                y = base + k * row_h
                cands.append((x, y))
        cands.sort(key=lambda p: math.hypot(p[0] + 1, p[1] + 1))
        return np.array(cands[:n])
    if family == "center_gather":
        pts = [(0.0, 0.0)]
        ring = 1
        while len(pts) < n:
            m = 6 * ring
            for j in range(m):
                a = 2 * math.pi * j / m
                pts.append((ring * gap * 1.05 * math.cos(a), ring * gap * 1.05 * math.sin(a)))
            ring += 1
        return np.array(pts[:n])
    if family == "shape_parallelogram":
        shear = rng.uniform(0.2, 0.35)
        corners = np.array([(-0.45, -0.3), (0.25, -0.3), (0.25 + shear, 0.3), (-0.45 + shear, 0.3)])
        pts = list(corners)
        # extra blocks go on edge midpoints, then quarter points
        edges = [(corners[i], corners[(i + 1) % 4]) for i in range(4)]
        for frac in (0.5, 0.25, 0.75):
            for a, b in edges:
                pts.append(a + frac * (b - a))
        return np.array(pts[:n])
    raise ConfigError(f"unknown task_family {family!r}; expected one of {sorted(TASK_FAMILIES)}")


def _place_blocks(n: int, r: float, rng: np.random.Generator) -> np.ndarray:
    pts: list[np.ndarray] = []
    while len(pts) < n:
        p = rng.uniform(-0.85, 0.85, size=2)
        if all(np.linalg.norm(p - q) > 2 * r + 0.08 for q in pts):
            pts.append(p)
    return np.array(pts)


def describe_relation(offset: np.ndarray) -> str:
    """Spatial relation of a block at ``ref + offset`` with respect to ``ref``."""
    dx, dy = float(offset[0]), float(offset[1])
    if math.hypot(dx, dy) < 0.17:
        return "near to"
    if abs(dx) < 0.45 * abs(dy):
        return "above" if dy > 0 else "below"
    if abs(dy) < 0.45 * abs(dx):
        return "right of" if dx > 0 else "left of"
    return "diagonal to"


def describe_region(pos: np.ndarray) -> str:
    x, y = float(pos[0]), float(pos[1])
    h = "left" if x < -0.33 else "right" if x > 0.33 else ""
    v = "bottom" if y < -0.33 else "top" if y > 0.33 else ""
    if h and v:
        return f"{v} {h} corner"
    return h or v or "center"


def caption(moved: int, positions: np.ndarray, blocks: Sequence[Block]) -> str:
    q = positions[moved]
    others = [j for j in range(len(blocks)) if j != moved]
    b = blocks[moved]
    if others:
        dists = [np.linalg.norm(q - positions[j]) for j in others]
        j = others[int(np.argmin(dists))]
        if min(dists) < 0.45:
            ref = blocks[j]
            rel = describe_relation(q - positions[j])
            return f"move the {b.color} {b.shape} {rel} the {ref.color} {ref.shape}"
    return f"push the {b.color} {b.shape} towards the {describe_region(q)}"


class _Pusher:
    """Kinematic pusher: the effector only moves the block it is pushing;
    that block displaces any block it comes to overlap."""

    def __init__(self, blocks: list[Block], pos: np.ndarray, eff: np.ndarray, cfg: SynthConfig):
        self.blocks = blocks
        self.pos = pos.copy()
        self.eff = eff.copy()
        self.cfg = cfg
        self.actions: list[np.ndarray] = []
        self.frames: list[BoardState] = [self.snapshot()]

    def snapshot(self) -> BoardState:
        return BoardState(
            blocks=tuple(replace(b, position=(float(p[0]), float(p[1])))
                         for b, p in zip(self.blocks, self.pos)),
            effector=(float(self.eff[0]), float(self.eff[1])))

    def _move(self, target: np.ndarray, push: int | None = None, direction=None, max_steps=60):
        cfg = self.cfg
        contact = cfg.block_radius + EFFECTOR_RADIUS
        for _ in range(max_steps):
            err = target - self.eff
            if np.linalg.norm(err) < 0.01:
                break
            delta = np.clip(cfg.gain * err if np.linalg.norm(err) > 0.04 else err,
                            -cfg.delta_max, cfg.delta_max)
            self.eff = np.clip(self.eff + delta, -0.97, 0.97)
            if push is not None:
                front = self.eff + direction * contact
                s = float(np.dot(front - self.pos[push], direction))
                if s > 0:
                    self.pos[push] = np.clip(self.pos[push] + direction * s, -1.0 + cfg.block_radius,
                                             1.0 - cfg.block_radius)
                    self._resolve(push)
            self.actions.append(delta)
            self.frames.append(self.snapshot())

    def _resolve(self, mover: int):
        r = self.cfg.block_radius
        lim = 1.0 - r
        for _ in range(8):
            clean = True
            for i in range(len(self.pos)):
                for j in range(len(self.pos)):
                    if i >= j:
                        continue
                    d = self.pos[j] - self.pos[i]
                    dist = float(np.linalg.norm(d))
                    if dist > 2 * r + 1e-3:
                        continue
                    clean = False
                    u = d / dist if dist > 1e-9 else np.array([1.0, 0.0])
                    # the mover never yields; otherwise split the correction
                    need = 2 * r + 0.004 - dist
                    if i == mover:
                        self.pos[j] = np.clip(self.pos[j] + u * need, -lim, lim)
                    elif j == mover:
                        self.pos[i] = np.clip(self.pos[i] - u * need, -lim, lim)
                    else:
                        self.pos[i] = np.clip(self.pos[i] - u * need / 2, -lim, lim)
                        self.pos[j] = np.clip(self.pos[j] + u * need / 2, -lim, lim)
            if clean:
                break

    def push_to(self, k: int, goal: np.ndarray):
        contact = self.cfg.block_radius + EFFECTOR_RADIUS
        d = goal - self.pos[k]
        u = d / np.linalg.norm(d)
        waypoint = np.clip(self.pos[k] - u * (contact + 0.05), -0.97, 0.97)
        self._move(waypoint)
        self._move(goal - u * contact, push=k, direction=u)


def generate_episode(seed: int, task_family: str, config: SynthConfig = SynthConfig(),
                     episode_id: int = 0) -> Episode:
    if task_family not in TASK_FAMILIES:
        raise ConfigError(f"unknown task_family {task_family!r}; expected one of {sorted(TASK_FAMILIES)}")
    rng = np.random.default_rng(seed)
    hi = config.max_blocks
    if task_family == "corner_gather":
        hi = min(hi, CORNER_CAPACITY)
    n = int(rng.integers(config.min_blocks, hi + 1))
    combos = [(c, s) for c in COLORS for s in SHAPES]
    picked = rng.choice(len(combos), size=n, replace=False)
    r = config.block_radius
    pos = _place_blocks(n, r, rng)
    blocks = [Block(shape=combos[i][1], color=combos[i][0], position=tuple(p), radius=r)
              for i, p in zip(picked, pos)]
    eff = rng.uniform(-0.9, 0.9, size=2)
    slots = _goal_slots(task_family, n, r, rng)
    cost = np.linalg.norm(pos[:, None, :] - slots[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    goals = np.empty_like(pos)
    goals[rows] = slots[cols]

    # fill slots nearest the formation centre first so later pushes come from outside
    centre = slots.mean(axis=0) if task_family != "corner_gather" else np.array([-1.0, -1.0])
    order = sorted(range(n), key=lambda k: np.linalg.norm(goals[k] - centre))

    pusher = _Pusher(blocks, pos, eff, config)
    segments: list[Segment] = []
    for _ in range(config.max_passes):
        moved = False
        for k in order:
            if np.linalg.norm(pusher.pos[k] - goals[k]) <= config.goal_tolerance:
                continue
            start = len(pusher.actions)
            pusher.push_to(k, goals[k])
            if len(pusher.actions) == start:
                continue
            segments.append(Segment(start, len(pusher.actions), caption(k, pusher.pos, blocks)))
            moved = True
        if not moved:
            break

    actions = np.array(pusher.actions, dtype=np.float64).reshape(-1, 2)
    return Episode(episode_id=episode_id, seed=seed, task_family=task_family,
                   high_level=TASK_FAMILIES[task_family], frames=pusher.frames,
                   actions=actions, segments=segments)


# ---------------------------------------------------------------------------
# windows / samples


def idle_windows(actions: np.ndarray, threshold: float = 0.1, horizon: int = HORIZON) -> np.ndarray:
    """Start indices of horizon-length windows whose summed |delta| exceeds
    ``threshold`` in at least one action dimension."""
    if threshold <= 0:
        raise ConfigError(f"threshold must be > 0, got {threshold}")
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
    T = len(actions)
    if T < horizon:
        return np.zeros(0, dtype=np.int64)
    csum = np.concatenate([np.zeros((1, 2)), np.cumsum(np.abs(actions), axis=0)])
    totals = csum[horizon:] - csum[:-horizon]
    return np.nonzero((totals > threshold).any(axis=1))[0]


def filter_idle(episode: Episode, threshold: float = 0.1, horizon: int = HORIZON,
                image_size: int = 64) -> list[Sample]:
    starts = idle_windows(episode.actions, threshold, horizon)
    if len(starts) == 0:
        return []
    images = render_episode(episode, image_size)
    out = []
    for t in starts:
        t = int(t)
        out.append(Sample(
            observation=Observation(image=images[t].astype(np.float32) / 255.0,
                                    effector_state=np.array(episode.frames[t].effector)),
            high_level=episode.high_level,
            low_level=episode.segment_at(t).low_level,
            chunk=ActionChunk(episode.actions[t:t + horizon].astype(np.float32)),
            episode_id=episode.episode_id, step=t))
    return out


@dataclass
class SampleSet:
    """Column-oriented storage of many samples (images kept as uint8)."""

    images: np.ndarray  # N x H x W x 3 uint8
    effector: np.ndarray  # N x 2 float32
    chunks: np.ndarray  # N x horizon x 2 float32
    high_level: list[str]
    low_level: list[str]
    episode_id: np.ndarray
    step: np.ndarray

    def __len__(self) -> int:
        return len(self.low_level)

    def __getitem__(self, i: int) -> Sample:
        return Sample(Observation(self.images[i].astype(np.float32) / 255.0, self.effector[i].copy()),
                      self.high_level[i], self.low_level[i], ActionChunk(self.chunks[i].copy()),
                      int(self.episode_id[i]), int(self.step[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(self.images[idx], self.effector[idx], self.chunks[idx],
                         [self.high_level[i] for i in idx], [self.low_level[i] for i in idx],
                         self.episode_id[idx], self.step[idx])

    def float_images(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(np.float32) / 255.0

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode], threshold: float = 0.1,
                      horizon: int = HORIZON, image_size: int = 64) -> "SampleSet":
        imgs, eff, chunks, hi, lo, eid, step = [], [], [], [], [], [], []
        for ep in episodes:
            starts = idle_windows(ep.actions, threshold, horizon)
            if len(starts) == 0:
                continue
            cached = ep.images is not None and ep.images.shape[1] == image_size
            for t in starts:
                t = int(t)
                imgs.append(ep.images[t] if cached else render(ep.frames[t], image_size))
                eff.append(ep.frames[t].effector)
                chunks.append(ep.actions[t:t + horizon])
                hi.append(ep.high_level)
                lo.append(ep.segment_at(t).low_level)
                eid.append(ep.episode_id)
                step.append(t)
        if not imgs:
            return cls(np.zeros((0, image_size, image_size, 3), np.uint8), np.zeros((0, 2), np.float32),
                       np.zeros((0, horizon, 2), np.float32), [], [], np.zeros(0, np.int64),
                       np.zeros(0, np.int64))
        return cls(np.stack(imgs), np.asarray(eff, np.float32), np.asarray(chunks, np.float32),
                   hi, lo, np.asarray(eid, np.int64), np.asarray(step, np.int64))


def split_episodes(episodes: Sequence[Episode], fractions=(0.8, 0.1, 0.1),
                   seed: int = 0) -> tuple[list[Episode], list[Episode], list[Episode]]:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(episodes)
    n_val = int(round(fr[1] * n))
    n_test = int(round(fr[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(f"{n} episodes cannot be split into three nonempty parts by {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    pick = lambda ix: [episodes[i] for i in sorted(ix)]  # noqa: E731
    return pick(perm[:n_train]), pick(perm[n_train:n_train + n_val]), pick(perm[n_train + n_val:])


def split_dataset(episodes: Sequence[Episode], fractions=(0.8, 0.1, 0.1), seed: int = 0,
                  threshold: float = 0.1) -> tuple[SampleSet, SampleSet, SampleSet]:
    """Episode-level split, so held-out samples always come from unseen episodes."""
    return tuple(SampleSet.from_episodes(part, threshold)
                 for part in split_episodes(episodes, fractions, seed))


def generate_dataset(n_episodes: int, seed: int, task_families: Sequence[str] | None = None,
                     config: SynthConfig = SynthConfig()) -> list[Episode]:
    """Episodes with per-episode seeds spawned from ``seed``; families cycle in order."""
    families = list(task_families or TASK_FAMILIES)
    for fam in families:
        if fam not in TASK_FAMILIES:
            raise ConfigError(f"unknown task_family {fam!r}")
    children = np.random.SeedSequence(seed).spawn(n_episodes)
    episodes = []
    for i, child in enumerate(children):
        ep_seed = int(child.generate_state(1)[0])
        episodes.append(generate_episode(ep_seed, families[i % len(families)], config, episode_id=i))
    return episodes


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    p_brightness: float = 0.5
    p_contrast: float = 0.5
    p_saturation: float = 0.5
    p_crop: float = 0.6
    p_vtranslate: float = 0.4
    p_htranslate: float = 0.4
    p_scale: float = 0.3
    p_action_noise: float = 0.7
    photometric_range: tuple[float, float] = (0.8, 1.2)
    min_crop_area: float = 0.85
    max_translate: float = 0.06
    scale_range: tuple[float, float] = (0.9, 1.1)
    action_sigma: float = 0.01
    delta_max: float = DELTA_MAX


@dataclass
class AugmentPlan:
    brightness: float | None = None
    contrast: float | None = None
    saturation: float | None = None
    crop: tuple[float, float, float] | None = None  # side fraction, row offset, col offset (fractions)
    vtranslate: float | None = None
    htranslate: float | None = None
    scale: float | None = None
    action_noise: bool = False

    def applied(self) -> dict[str, bool]:
        return {k: (v is not None and v is not False) for k, v in vars(self).items()}


def draw_plan(rng, cfg: AugmentConfig = AugmentConfig()) -> AugmentPlan:
    """Roll each augmentation independently with its configured probability."""
    plan = AugmentPlan()
    lo, hi = cfg.photometric_range
    if rng.random() < cfg.p_brightness:
        plan.brightness = float(rng.uniform(lo, hi))
    if rng.random() < cfg.p_contrast:
        plan.contrast = float(rng.uniform(lo, hi))
    if rng.random() < cfg.p_saturation:
        plan.saturation = float(rng.uniform(lo, hi))
    if rng.random() < cfg.p_crop:
        side = float(np.sqrt(rng.uniform(cfg.min_crop_area, 1.0)))
        plan.crop = (side, float(rng.uniform(0, 1 - side)), float(rng.uniform(0, 1 - side)))
    if rng.random() < cfg.p_vtranslate:
        plan.vtranslate = float(rng.uniform(-cfg.max_translate, cfg.max_translate))
    if rng.random() < cfg.p_htranslate:
        plan.htranslate = float(rng.uniform(-cfg.max_translate, cfg.max_translate))
    if rng.random() < cfg.p_scale:
        plan.scale = float(rng.uniform(*cfg.scale_range))
    plan.action_noise = bool(rng.random() < cfg.p_action_noise)
    return plan


def _warp(image: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    H, W, _ = image.shape
    if plan.crop is None and plan.vtranslate is None and plan.htranslate is None and plan.scale is None:
        return image
    rr, cc = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    # output -> input coordinates: undo scale, then translation, then crop-resize
    if plan.scale is not None:
        rr = (H - 1) / 2 + (rr - (H - 1) / 2) / plan.scale
        cc = (W - 1) / 2 + (cc - (W - 1) / 2) / plan.scale
    if plan.vtranslate is not None:
        rr = rr - plan.vtranslate * H
    if plan.htranslate is not None:
        cc = cc - plan.htranslate * W
    if plan.crop is not None:
        side, r0, c0 = plan.crop
        rr = r0 * H + rr * side
        cc = c0 * W + cc * side
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        out[..., ch] = map_coordinates(image[..., ch], [rr, cc], order=1, mode="nearest")
    return out


def apply_plan(image: np.ndarray, deltas: np.ndarray, plan: AugmentPlan, rng,
               cfg: AugmentConfig = AugmentConfig()) -> tuple[np.ndarray, np.ndarray]:
    img = image.astype(np.float32, copy=True)
    if plan.brightness is not None:
        img *= plan.brightness
    if plan.contrast is not None:
        m = img.mean()
        img = (img - m) * plan.contrast + m
    if plan.saturation is not None:
        gray = img.mean(axis=2, keepdims=True)
        img = gray + (img - gray) * plan.saturation
    img = _warp(img, plan)
    img = np.clip(img, 0.0, 1.0)
    out_deltas = deltas
    if plan.action_noise:
        noise = rng.normal(0.0, cfg.action_sigma, size=deltas.shape)
        out_deltas = np.clip(deltas + noise, -cfg.delta_max, cfg.delta_max).astype(deltas.dtype)
    return img, out_deltas


def augment(sample: Sample, rng, cfg: AugmentConfig = AugmentConfig(),
            return_plan: bool = False):
    """Photometric/geometric image jitter and action noise; never mirrors."""
    plan = draw_plan(rng, cfg)
    img, deltas = apply_plan(sample.observation.image, sample.chunk.deltas, plan, rng, cfg)
    out = replace(sample, observation=Observation(img, sample.observation.effector_state),
                  chunk=ActionChunk(deltas))
    return (out, plan) if return_plan else out


def augment_batch(images: np.ndarray, chunks: np.ndarray, rng,
                  cfg: AugmentConfig = AugmentConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Augment float images (B,H,W,3) and chunks (B,h,2) sample by sample."""
    imgs = np.empty_like(images, dtype=np.float32)
    out_chunks = np.empty_like(chunks)
    for i in range(len(images)):
        plan = draw_plan(rng, cfg)
        imgs[i], out_chunks[i] = apply_plan(images[i], chunks[i], plan, rng, cfg)
    return imgs, out_chunks


# ---------------------------------------------------------------------------
# persistence


def _board_to_json(state: BoardState) -> dict:
    return {"effector": list(state.effector),
            "blocks": [{"shape": b.shape, "color": b.color, "position": list(b.position),
                        "radius": b.radius} for b in state.blocks]}


def _board_from_json(d: dict) -> BoardState:
    return BoardState(blocks=tuple(Block(b["shape"], b["color"], tuple(b["position"]), b["radius"])
                                   for b in d["blocks"]),
                      effector=tuple(d["effector"]))


def save_episode(episode: Episode, root: Path, image_size: int = 64):
    root = Path(root)
    (root / "episodes").mkdir(parents=True, exist_ok=True)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    images = render_episode(episode, image_size)
    stem = f"{episode.episode_id:04d}"
    blob = f"frames/{stem}.u8"
    (root / blob).write_bytes(np.ascontiguousarray(images, dtype=np.uint8).tobytes())
    doc = {
        "format_version": FORMAT_VERSION,
        "episode_id": episode.episode_id,
        "seed": episode.seed,
        "task_family": episode.task_family,
        "high_level": episode.high_level,
        "segments": [[s.start, s.end, s.low_level] for s in episode.segments],
        "actions": episode.actions.tolist(),
        "frames": [_board_to_json(f) for f in episode.frames],
        "image_blob": blob,
        "image_shape": list(images.shape),
    }
    (root / "episodes" / f"{stem}.json").write_text(json.dumps(doc, sort_keys=True))


def load_episode(path: Path) -> Episode:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported format_version {doc.get('format_version')}")
    root = path.parent.parent
    shape = tuple(doc["image_shape"])
    images = np.frombuffer((root / doc["image_blob"]).read_bytes(), dtype=np.uint8).reshape(shape)
    return Episode(episode_id=doc["episode_id"], seed=doc["seed"], task_family=doc["task_family"],
                   high_level=doc["high_level"],
                   frames=[_board_from_json(f) for f in doc["frames"]],
                   actions=np.asarray(doc["actions"], dtype=np.float64).reshape(-1, 2),
                   segments=[Segment(s, e, t) for s, e, t in doc["segments"]],
                   images=images)


def save_dataset(episodes: Sequence[Episode], root, meta: dict | None = None, image_size: int = 64):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for ep in episodes:
        save_episode(ep, root, image_size)
    index = {"format_version": FORMAT_VERSION, "n_episodes": len(episodes),
             "episodes": [f"episodes/{ep.episode_id:04d}.json" for ep in episodes],
             "image_size": image_size, "meta": meta or {}}
    (root / "dataset.json").write_text(json.dumps(index, sort_keys=True, indent=1))


def load_dataset(root) -> list[Episode]:
    root = Path(root)
    index_path = root / "dataset.json"
    if not index_path.exists():
        raise FileNotFoundError(f"{root} has no dataset.json (produce it with the `gen` stage)")
    index = json.loads(index_path.read_text())
    if index.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{index_path}: unsupported format_version {index.get('format_version')}")
    return [load_episode(root / rel) for rel in index["episodes"]]


def write_ppm(image: np.ndarray, path):
    """Binary P6 export of one uint8 frame, for eyeballing."""
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())
