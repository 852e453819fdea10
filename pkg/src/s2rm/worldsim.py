"""Bouncing-balls world: simulation, rendering, view sampling and dataset files.

Coordinates: a ball position is ``(x, y)`` with ``x`` along columns and ``y``
along rows; pixel ``(i, j)`` has its center at ``(j + 0.5, i + 0.5)``. View
centers are integer pixel indices ``(row, col)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError

FRAME = 48
CROP = 11
HALF = CROP // 2
CENTER_MIN = HALF
CENTER_MAX = FRAME - 1 - HALF  # 42

MAGIC = b"S2RMBB1\n"
VERSION = 1
_HEADER = struct.Struct("<9I")
HEADER_SIZE = len(MAGIC) + _HEADER.size
FRAME_BYTES = FRAME * FRAME // 8

_MASK64 = (1 << 64) - 1


def splitmix(master_seed: int, index: int) -> int:
    """Independent 64-bit seed for sequence ``index`` (splitmix64 output)."""
    z = (master_seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SimConfig:
    size: float = FRAME
    radius: float = 3.0
    speed_min: float = 0.5
    speed_max: float = 2.0
    fixed_ball: bool = True
    fixed_radius: float = 4.0
    fixed_center: tuple = (24.0, 24.0)

    def __post_init__(self):
        if self.radius <= 0 or 2 * self.radius >= self.size:
            raise ConfigError(f"ball radius {self.radius} does not fit a box of size {self.size}")
        if self.fixed_ball and (self.fixed_radius <= 0 or 2 * self.fixed_radius >= self.size):
            raise ConfigError(f"fixed ball radius {self.fixed_radius} does not fit the box")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ConfigError("need 0 <= speed_min <= speed_max")


@dataclass
class BallState:
    pos: tuple
    vel: tuple
    radius: float
    fixed: bool = False


@dataclass
class Trajectory:
    """``pos``/``vel`` are ``(T, N, 2)``; the fixed ball, if any, is the last body."""

    pos: np.ndarray
    vel: np.ndarray
    radius: np.ndarray
    fixed: np.ndarray

    def __len__(self):
        return self.pos.shape[0]

    def balls(self, t: int) -> list[BallState]:
        return [BallState(tuple(self.pos[t, k]), tuple(self.vel[t, k]), float(self.radius[k]), bool(self.fixed[k]))
                for k in range(self.pos.shape[1])]


def initial_state(n_balls: int, rng: np.random.Generator, config: SimConfig = SimConfig()):
    """Non-overlapping random placement; returns ``(pos, vel, radius, fixed)`` for one world."""
    if n_balls < 1:
        raise ConfigError("n_balls must be at least 1")
    radius, fixed, pos = [], [], []
    if config.fixed_ball:
        fixed_pos = np.asarray(config.fixed_center, dtype=float)
    lo, hi = config.radius, config.size - config.radius
    for _ in range(n_balls):
        for _attempt in range(10000):
            p = rng.uniform(lo, hi, size=2)
            clear = all(np.hypot(*(p - q)) > 2 * config.radius for q in pos)
            if config.fixed_ball:
                clear = clear and np.hypot(*(p - fixed_pos)) > config.radius + config.fixed_radius
            if clear:
                break
        else:
            raise ConfigError(f"cannot place {n_balls} balls without overlap")
        pos.append(p)
        radius.append(config.radius)
        fixed.append(False)
    angle = rng.uniform(0, 2 * np.pi, size=n_balls)
    speed = rng.uniform(config.speed_min, config.speed_max, size=n_balls)
    vel = np.stack((speed * np.cos(angle), speed * np.sin(angle)), axis=1)
    if config.fixed_ball:
        pos.append(fixed_pos)
        vel = np.vstack((vel, np.zeros((1, 2))))
        radius.append(config.fixed_radius)
        fixed.append(True)
    return np.array(pos, dtype=float), vel, np.array(radius, dtype=float), np.array(fixed, dtype=bool)


def reflect_walls(pos: np.ndarray, vel: np.ndarray, radius: np.ndarray, size: float = FRAME) -> None:
    """Mirror overshoot about the contact lines and flip the velocity component, in place.

    ``pos``/``vel`` are ``(..., N, 2)``; ``radius`` broadcasts against ``(..., N)``.
    """
    lo = np.broadcast_to(radius[..., None], pos.shape)
    hi = size - lo
    for _ in range(64):
        over = pos > hi
        under = pos < lo
        if not (over.any() or under.any()):
            return
        pos[over] = 2 * hi[over] - pos[over]
        vel[over] = -np.abs(vel[over])
        pos[under] = 2 * lo[under] - pos[under]
        vel[under] = np.abs(vel[under])
    np.clip(pos, lo, hi, out=pos)


def collide(pos: np.ndarray, vel: np.ndarray, radius: np.ndarray, fixed: np.ndarray) -> None:
    """Resolve pairwise contacts by updating velocities in place.

    Overlapping, approaching pairs of moving balls exchange the velocity
    components along their center line (equal masses). A moving ball
    approaching a fixed ball has its normal component reflected.
    """
    n = pos.shape[-2]
    for i, j in combinations(range(n), 2):
        if fixed[i] and fixed[j]:
            continue
        if fixed[i]:
            i, j = j, i
        delta = pos[..., j, :] - pos[..., i, :]
        dist = np.sqrt((delta ** 2).sum(-1))
        touching = (dist < radius[i] + radius[j]) & (dist > 0)
        if not touching.any():
            continue
        normal = delta / np.where(dist > 0, dist, 1.0)[..., None]
        vi_n = (vel[..., i, :] * normal).sum(-1)
        vj_n = (vel[..., j, :] * normal).sum(-1)
        hit = touching & (vi_n - vj_n > 0)
        if not hit.any():
            continue
        h = hit[..., None]
        if fixed[j]:
            vel[..., i, :] = np.where(h, vel[..., i, :] - 2 * vi_n[..., None] * normal, vel[..., i, :])
        else:
            swap = (vj_n - vi_n)[..., None] * normal
            vel[..., i, :] = np.where(h, vel[..., i, :] + swap, vel[..., i, :])
            vel[..., j, :] = np.where(h, vel[..., j, :] - swap, vel[..., j, :])


def advance(pos, vel, radius, fixed, size: float = FRAME) -> None:
    """One time step in place: contacts, free flight, wall reflection."""
    collide(pos, vel, radius, fixed)
    pos += vel
    reflect_walls(pos, vel, radius, size)


def simulate(n_balls: int, T: int, seed: int, config: SimConfig = SimConfig(),
             rng: np.random.Generator | None = None) -> Trajectory:
    """Trajectory of ``T`` states (``t = 0`` is the initial placement)."""
    if T < 1:
        raise ConfigError("T must be at least 1")
    rng = np.random.default_rng(seed) if rng is None else rng
    pos, vel, radius, fixed = initial_state(n_balls, rng, config)
    P = np.empty((T,) + pos.shape)
    V = np.empty_like(P)
    P[0], V[0] = pos, vel
    for t in range(1, T):
        advance(pos, vel, radius, fixed, config.size)
        P[t], V[t] = pos, vel
    return Trajectory(P, V, radius, fixed)


def render(balls, radius=None, size: int = FRAME) -> np.ndarray:
    """Binary ``size x size`` frame; a pixel is lit iff its center lies within a ball.

    ``balls`` is either a list of :class:`BallState` or an ``(N, 2)`` array of
    positions with ``radius`` given separately.
    """
    if radius is None:
        pos = np.array([b.pos for b in balls], dtype=float).reshape(-1, 2)
        radius = np.array([b.radius for b in balls], dtype=float)
    else:
        pos = np.asarray(balls, dtype=float).reshape(-1, 2)
        radius = np.broadcast_to(np.asarray(radius, dtype=float), (pos.shape[0],))
    centers = np.arange(size) + 0.5
    frame = np.zeros((size, size), dtype=bool)
    for (x, y), r in zip(pos, radius):
        dy = (centers - y)[:, None] ** 2
        dx = (centers - x)[None, :] ** 2
        frame |= dx + dy <= r * r
    return frame.astype(np.uint8)


def extract_crops(frame: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """``(A, 11, 11)`` windows of ``frame`` around integer ``(row, col)`` centers."""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    if centers.size and (centers.min() < CENTER_MIN or centers.max() > CENTER_MAX):
        raise InputError(f"view centers must lie in [{CENTER_MIN}, {CENTER_MAX}]^2")
    offsets = np.arange(-HALF, HALF + 1)
    rows = centers[:, 0, None, None] + offsets[None, :, None]
    cols = centers[:, 1, None, None] + offsets[None, None, :]
    return frame[rows, cols]


def sample_centers(A: int, rng: np.random.Generator) -> np.ndarray:
    if A < 0:
        raise InputError("A must be non-negative")
    return rng.integers(CENTER_MIN, CENTER_MAX + 1, size=(A, 2))


def sample_views(frame: np.ndarray, A: int, rng: np.random.Generator):
    """Return ``(centers (A, 2), crops (A, 11, 11))`` with full crops inside the frame."""
    centers = sample_centers(A, rng)
    return centers, extract_crops(frame, centers)


@dataclass
class EpisodeRecord:
    frames: np.ndarray  # (T, 48, 48) uint8
    centers: np.ndarray  # (T, A, 2) int
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def A(self) -> int:
        return self.centers.shape[1]

    def crops(self, t: int | None = None) -> np.ndarray:
        """Crops at step ``t`` ``(A, 11, 11)``, or all steps ``(T, A, 11, 11)``."""
        if t is not None:
            return extract_crops(self.frames[t], self.centers[t])
        return np.stack([extract_crops(f, c) for f, c in zip(self.frames, self.centers)])


def generate_episode(n_balls: int, T: int, A: int, seed: int, config: SimConfig = SimConfig()) -> EpisodeRecord:
    """Simulate, render and sample views; reproducible from ``seed`` alone."""
    rng = np.random.default_rng(seed)
    traj = simulate(n_balls, T, seed, config, rng=rng)
    frames = np.stack([render(traj.pos[t], traj.radius) for t in range(T)])
    centers = np.stack([sample_centers(A, rng) for _ in range(T)]).reshape(T, A, 2)
    return EpisodeRecord(frames, centers, dict(n_balls=n_balls, seed=seed, T=T, A=A))


@dataclass(frozen=True)
class DatasetSpec:
    n_seq: int = 500
    T: int = 30
    A: int = 10
    n_balls: int = 3
    seed: int = 0


@dataclass(frozen=True)
class DatasetHeader:
    n_seq: int
    T: int
    A: int
    n_balls: int
    seed: int
    H: int = FRAME
    W: int = FRAME
    version: int = VERSION

    @property
    def block_size(self) -> int:
        return self.T * FRAME_BYTES + self.T * self.A * 4

    def pack(self) -> bytes:
        return MAGIC + _HEADER.pack(self.version, self.n_seq, self.T, self.H, self.W, self.A,
                                    self.n_balls, self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF)

    @classmethod
    def unpack(cls, raw: bytes) -> "DatasetHeader":
        if raw[: len(MAGIC)] != MAGIC:
            raise FormatError("bad dataset magic", offset=0)
        if len(raw) < HEADER_SIZE:
            raise FormatError("truncated dataset header", offset=len(raw))
        version, n_seq, T, H, W, A, n_balls, lo, hi = _HEADER.unpack_from(raw, len(MAGIC))
        if version != VERSION:
            raise FormatError(f"unsupported dataset version {version}", offset=len(MAGIC))
        if (H, W) != (FRAME, FRAME):
            raise FormatError(f"unsupported frame size {H}x{W}", offset=len(MAGIC) + 12)
        return cls(n_seq=n_seq, T=T, A=A, n_balls=n_balls, seed=lo | (hi << 32), H=H, W=W, version=version)


def encode_episode(ep: EpisodeRecord) -> bytes:
    frames = np.packbits(ep.frames.astype(bool).reshape(ep.T, -1), axis=1)
    views = ep.centers.astype("<u2").reshape(-1)
    return frames.tobytes() + views.tobytes()


def decode_episode(block: bytes, header: DatasetHeader, offset: int = 0, index: int | None = None) -> EpisodeRecord:
    T, A = header.T, header.A
    frames = np.unpackbits(np.frombuffer(block, np.uint8, T * FRAME_BYTES).reshape(T, FRAME_BYTES), axis=1)
    frames = frames.reshape(T, FRAME, FRAME)
    centers = np.frombuffer(block, "<u2", T * A * 2, offset=T * FRAME_BYTES).astype(np.int64).reshape(T, A, 2)
    if centers.size and (centers.min() < CENTER_MIN or centers.max() > CENTER_MAX):
        raise FormatError("view center out of range", offset=offset + T * FRAME_BYTES)
    meta = dict(n_balls=header.n_balls, T=T, A=A)
    if index is not None:
        meta.update(index=index, seed=splitmix(header.seed, index))
    return EpisodeRecord(frames, centers, meta)


def generate_dataset(spec: DatasetSpec, path, config: SimConfig = SimConfig()) -> Path:
    """Write ``spec.n_seq`` episodes to ``path``; sequence ``i`` uses ``splitmix(seed, i)``."""
    path = Path(path)
    header = DatasetHeader(n_seq=spec.n_seq, T=spec.T, A=spec.A, n_balls=spec.n_balls, seed=spec.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.pack())
        for i in range(spec.n_seq):
            ep = generate_episode(spec.n_balls, spec.T, spec.A, splitmix(spec.seed, i), config)
            fh.write(encode_episode(ep))
    return path


class BouncingBallsDataset:
    """Lazy, random-access view of a dataset file."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            raw = fh.read(HEADER_SIZE)
        self.header = DatasetHeader.unpack(raw)
        size = self.path.stat().st_size
        expected = HEADER_SIZE + self.header.n_seq * self.header.block_size
        if size < expected:
            raise FormatError(f"dataset truncated: expected {expected} bytes, found {size}", offset=size)
        if size > expected:
            raise FormatError(f"trailing bytes after {self.header.n_seq} sequences", offset=expected)
        self._data = np.memmap(self.path, dtype=np.uint8, mode="r")

    def __len__(self) -> int:
        return self.header.n_seq

    @property
    def n_balls(self) -> int:
        return self.header.n_balls

    def __getitem__(self, i: int) -> EpisodeRecord:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i %= len(self)
        start = HEADER_SIZE + i * self.header.block_size
        block = bytes(self._data[start: start + self.header.block_size])
        return decode_episode(block, self.header, offset=start, index=i)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def arrays(self, indices=None):
        """Stacked ``frames (B, T, 48, 48)`` and ``centers (B, T, A, 2)``."""
        indices = range(len(self)) if indices is None else indices
        eps = [self[i] for i in indices]
        return np.stack([e.frames for e in eps]), np.stack([e.centers for e in eps])


def load_dataset(path) -> BouncingBallsDataset:
    return BouncingBallsDataset(path)
