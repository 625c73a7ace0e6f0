"""Scripted-expert offline data generation and the episode dataset file format.

Dataset file layout (little-endian)::

    header   magic b"EVTDATA\\0", u32 version, u32 episode count, u64 total steps
    episode  u32 length, u64 seed, u8 failed, f64 x 6 embodiment
             (camera_height, v_max, omega_max, inertia_tau, fov_h, target_speed),
             u16 mask_w, u16 mask_h, u8 pattern code, RLE final mask
    step     f64 v_norm, f64 omega_norm, f64 reward, f64 rho, f64 theta,
             u8 flags (bit0 done, bit1 lost), RLE mask
    trailer  u32 CRC32 over every preceding byte

RLE masks are ``u32 run count`` followed by ``(u8 label, u16 length)`` runs
over the row-major flattened grid.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tracksim as ts
from .tracksim import ActionCommand, EmbodimentConfig, RewardSpec, Scenario

MAGIC = b"EVTDATA\x00"
FORMAT_VERSION = 1
PATTERNS = ("random", "s_curve", "static")

TRAIN_HEIGHTS = (0.5, 1.0, 1.7)
TRAIN_VMAX = (0.8, 1.15, 1.5)


class DatasetError(Exception):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


# ------------------------------------------------------------------ PID expert

@dataclass(frozen=True)
class PIDGains:
    kp_rho: float = 0.9
    ki_rho: float = 0.05
    kd_rho: float = 0.1
    kp_theta: float = 2.0
    ki_theta: float = 0.05
    kd_theta: float = 0.1
    integral_limit: float = 2.0


class PIDExpert:
    """Two independent PID loops: forward speed on distance error, turn rate on bearing."""

    def __init__(self, gains: PIDGains = PIDGains()):
        self.gains = gains
        self.reset()

    def reset(self) -> None:
        self.i_rho = 0.0
        self.i_theta = 0.0
        self.prev: Optional[tuple[float, float]] = None

    def __call__(self, rho: float, theta: float) -> ActionCommand:
        g = self.gains
        e_rho = rho - RewardSpec.rho_star
        e_theta = theta - RewardSpec.theta_star
        lim = g.integral_limit
        self.i_rho = float(np.clip(self.i_rho + e_rho * ts.DT, -lim, lim))
        self.i_theta = float(np.clip(self.i_theta + e_theta * ts.DT, -lim, lim))
        if self.prev is None:
            d_rho = d_theta = 0.0
        else:
            d_rho = (e_rho - self.prev[0]) / ts.DT
            d_theta = ts.wrap_angle(e_theta - self.prev[1]) / ts.DT
        self.prev = (e_rho, e_theta)
        v = g.kp_rho * e_rho + g.ki_rho * self.i_rho + g.kd_rho * d_rho
        w = g.kp_theta * e_theta + g.ki_theta * self.i_theta + g.kd_theta * d_theta
        return ActionCommand(float(np.clip(v, -1, 1)), float(np.clip(w, -1, 1)))


def pid_expert(rho: float, theta: float, gains: PIDGains = PIDGains()) -> ActionCommand:
    """Memoryless single evaluation (integral and derivative terms start at zero)."""
    return PIDExpert(gains)(rho, theta)


# ------------------------------------------------------------------ records

@dataclass(frozen=True)
class TransitionRecord:
    mask: np.ndarray
    action: np.ndarray
    reward: float
    done: bool
    lost: bool
    rho: float
    theta: float


@dataclass
class EpisodeRecord:
    """One full episode; per-step fields are parallel arrays of length T_e.

    ``masks[t]`` is the observation before ``actions[t]``; ``rewards[t]``,
    ``rhos[t]``, ``thetas[t]`` and ``lost[t]`` describe the state reached after it.
    """

    embodiment: EmbodimentConfig
    target_speed: float
    pattern: str
    seed: int
    failed: bool
    masks: np.ndarray  # (T, H, W) uint8
    actions: np.ndarray  # (T, 2)
    rewards: np.ndarray  # (T,)
    rhos: np.ndarray
    thetas: np.ndarray
    dones: np.ndarray  # (T,) bool
    lost: np.ndarray  # (T,) bool
    final_mask: np.ndarray = field(default=None)

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def camera_height(self) -> float:
        return self.embodiment.camera_height

    def transitions(self) -> Iterator[TransitionRecord]:
        for t in range(self.length):
            yield TransitionRecord(self.masks[t], self.actions[t], float(self.rewards[t]),
                                   bool(self.dones[t]), bool(self.lost[t]),
                                   float(self.rhos[t]), float(self.thetas[t]))

    def next_masks(self) -> np.ndarray:
        return np.concatenate([self.masks[1:], self.final_mask[None]], axis=0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EpisodeRecord):
            return NotImplemented
        scalars = ("embodiment", "target_speed", "pattern", "seed", "failed")
        arrays = ("masks", "actions", "rewards", "rhos", "thetas", "dones", "lost", "final_mask")
        return all(getattr(self, k) == getattr(other, k) for k in scalars) and all(
            getattr(self, k).shape == getattr(other, k).shape
            and getattr(self, k).tobytes() == getattr(other, k).tobytes()
            for k in arrays
        )


@dataclass
class DatasetManifest:
    format_version: int
    episode_count: int
    total_steps: int
    grid: list
    seed: int
    noise_level: float = 0.0
    episodes_per_cell: int = 0
    target_speeds: list = field(default_factory=list)
    failures: int = 0
    mean_reward: float = 0.0
    sha256: str = ""

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


# ------------------------------------------------------------------ RLE

def rle_encode(mask: np.ndarray) -> bytes:
    flat = mask.reshape(-1)
    if flat.size == 0:
        return struct.pack("<I", 0)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    runs = []
    for s, n in zip(starts, lengths):
        value = int(flat[s])
        while n > 0:  # u16 lengths: split long runs
            chunk = min(int(n), 0xFFFF)
            runs.append(struct.pack("<BH", value, chunk))
            n -= chunk
    return struct.pack("<I", len(runs)) + b"".join(runs)


class _Reader:
    def __init__(self, blob: bytes, end: int):
        self.blob = blob
        self.pos = 0
        self.end = end

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > self.end:
            raise DatasetTruncatedError(f"dataset truncated at byte {self.pos} (needed {size} more)")
        out = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return out

    def rle(self, h: int, w: int) -> np.ndarray:
        (n_runs,) = self.take("<I")
        size = 3 * n_runs
        if self.pos + size > self.end:
            raise DatasetTruncatedError(f"dataset truncated inside a mask at byte {self.pos}")
        runs = np.frombuffer(self.blob, dtype=np.dtype([("v", "u1"), ("n", "<u2")]), count=n_runs,
                             offset=self.pos)
        self.pos += size
        flat = np.repeat(runs["v"], runs["n"].astype(np.int64))
        if flat.size != h * w:
            raise DatasetError(f"mask run lengths sum to {flat.size}, expected {h * w}")
        return flat.reshape(h, w).astype(np.uint8)


# ------------------------------------------------------------------ file I/O

def _encode_episode(ep: EpisodeRecord) -> bytes:
    e = ep.embodiment
    parts = [
        struct.pack("<IQB", ep.length, ep.seed, int(ep.failed)),
        struct.pack("<6d", e.camera_height, e.v_max, e.omega_max, e.inertia_tau, e.fov_h, ep.target_speed),
        struct.pack("<HHB", e.mask_w, e.mask_h, PATTERNS.index(ep.pattern)),
        rle_encode(ep.final_mask),
    ]
    for t in range(ep.length):
        flags = int(ep.dones[t]) | (int(ep.lost[t]) << 1)
        parts.append(struct.pack("<5dB", ep.actions[t, 0], ep.actions[t, 1], ep.rewards[t],
                                 ep.rhos[t], ep.thetas[t], flags))
        parts.append(rle_encode(ep.masks[t]))
    return b"".join(parts)


def save_dataset(path, episodes: Sequence[EpisodeRecord]) -> bytes:
    """Write episodes to ``path`` and return the bytes written."""
    total = int(sum(ep.length for ep in episodes))
    body = MAGIC + struct.pack("<IIQ", FORMAT_VERSION, len(episodes), total)
    body += b"".join(_encode_episode(ep) for ep in episodes)
    blob = body + struct.pack("<I", zlib.crc32(body))
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {path}: {exc}") from exc
    return blob


def load_dataset(path) -> list[EpisodeRecord]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4:
        raise DatasetTruncatedError(f"{path}: file too short for a header")
    if blob[: len(MAGIC)] != MAGIC:
        raise DatasetError(f"{path}: not a dataset file")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    rd = _Reader(blob, len(blob))
    rd.pos = len(MAGIC) + 4
    n_eps, total = rd.take("<IQ")
    episodes = []
    for _ in range(n_eps):
        length, seed, failed = rd.take("<IQB")
        h, v_max, omega_max, tau, fov, speed = rd.take("<6d")
        mask_w, mask_h, pattern = rd.take("<HHB")
        emb = EmbodimentConfig(camera_height=h, v_max=v_max, omega_max=omega_max, inertia_tau=tau,
                               fov_h=fov, mask_w=mask_w, mask_h=mask_h)
        final_mask = rd.rle(mask_h, mask_w)
        masks = np.zeros((length, mask_h, mask_w), dtype=np.uint8)
        scal = np.zeros((length, 5))
        flags = np.zeros(length, dtype=np.uint8)
        for t in range(length):
            *vals, fl = rd.take("<5dB")
            scal[t] = vals
            flags[t] = fl
            masks[t] = rd.rle(mask_h, mask_w)
        episodes.append(EpisodeRecord(
            embodiment=emb, target_speed=speed, pattern=PATTERNS[pattern], seed=seed,
            failed=bool(failed), masks=masks, actions=scal[:, :2].copy(), rewards=scal[:, 2].copy(),
            rhos=scal[:, 3].copy(), thetas=scal[:, 4].copy(), dones=(flags & 1).astype(bool),
            lost=(flags & 2).astype(bool), final_mask=final_mask,
        ))
    if rd.pos + 4 > len(blob):
        raise DatasetTruncatedError(f"{path}: missing checksum trailer")
    (crc,) = struct.unpack_from("<I", blob, rd.pos)
    if rd.pos + 4 != len(blob):
        raise DatasetError(f"{path}: trailing bytes after checksum")
    if zlib.crc32(blob[: rd.pos]) != crc:
        raise DatasetChecksumError(f"{path}: checksum mismatch")
    if sum(ep.length for ep in episodes) != total:
        raise DatasetError(f"{path}: header total steps {total} disagrees with episodes")
    return episodes


# ------------------------------------------------------------------ generation

def rollout_expert(embodiment: EmbodimentConfig, scenario: Scenario, seed: int,
                   noise_level: float, noise_rng: np.random.Generator,
                   gains: PIDGains = PIDGains()) -> EpisodeRecord:
    expert = PIDExpert(gains)
    state, mask = ts.reset(embodiment, seed, scenario)
    masks, actions, rewards, rhos, thetas, dones, lost = [], [], [], [], [], [], []
    while True:
        rho, theta, _, _ = ts.privileged_state(state)
        cmd = expert(rho, theta).as_array()
        if noise_level > 0:
            cmd = cmd + noise_rng.normal(0.0, noise_level, size=2)
        cmd = np.clip(cmd, -1.0, 1.0)
        res = ts.step(state, ActionCommand(float(cmd[0]), float(cmd[1])), embodiment, scenario)
        masks.append(mask)
        actions.append(cmd)
        rewards.append(res.reward)
        rhos.append(res.info["rho"])
        thetas.append(res.info["theta"])
        dones.append(res.terminated)
        lost.append(res.info["lost"])
        state, mask = res.state, res.mask
        if res.terminated:
            break
    return EpisodeRecord(
        embodiment=embodiment, target_speed=scenario.target_speed, pattern=scenario.pattern,
        seed=seed, failed=state.failed, masks=np.stack(masks), actions=np.array(actions),
        rewards=np.array(rewards), rhos=np.array(rhos), thetas=np.array(thetas),
        dones=np.array(dones), lost=np.array(lost), final_mask=mask,
    )


def embodiment_grid(heights=TRAIN_HEIGHTS, v_max=TRAIN_VMAX,
                    base: EmbodimentConfig = EmbodimentConfig()) -> list[EmbodimentConfig]:
    return [base.replace(camera_height=float(h), v_max=float(v)) for h in heights for v in v_max]


def generate_episodes(grid: Sequence[EmbodimentConfig], episodes_per_cell: int, noise_level: float,
                      seed: int, scenario: Scenario = Scenario(),
                      target_speeds: Sequence[float] = (0.5, 1.0),
                      gains: PIDGains = PIDGains()) -> list[EpisodeRecord]:
    """Expert rollouts for every grid cell; target speeds cycle across a cell's episodes."""
    if not grid:
        raise ValueError("embodiment grid is empty")
    cells = np.random.SeedSequence(seed).spawn(len(grid))
    episodes = []
    for emb, cell_seq in zip(grid, cells):
        rng = np.random.default_rng(cell_seq)
        for k in range(episodes_per_cell):
            ep_seed = int(rng.integers(0, 2**63 - 1))
            speed = float(target_speeds[k % len(target_speeds)])
            sc = dataclasses.replace(scenario, target_speed=speed)
            noise_rng = np.random.default_rng(ep_seed ^ 0x5EED)
            episodes.append(rollout_expert(emb, sc, ep_seed, noise_level, noise_rng, gains))
    return episodes


def generate_dataset(grid: Sequence[EmbodimentConfig], episodes_per_cell: int, noise_level: float,
                     seed: int, out_path, scenario: Scenario = Scenario(),
                     target_speeds: Sequence[float] = (0.5, 1.0),
                     gains: PIDGains = PIDGains()) -> DatasetManifest:
    """Generate, write ``out_path`` and ``out_path.manifest.json``; return the manifest."""
    out = Path(out_path)
    if not out.parent.exists():
        raise DatasetError(f"output directory {out.parent} does not exist")
    episodes = generate_episodes(grid, episodes_per_cell, noise_level, seed, scenario,
                                 target_speeds, gains)
    blob = save_dataset(out, episodes)
    manifest = DatasetManifest(
        format_version=FORMAT_VERSION,
        episode_count=len(episodes),
        total_steps=int(sum(ep.length for ep in episodes)),
        grid=[e.__dict__.copy() for e in grid],
        seed=seed,
        noise_level=noise_level,
        episodes_per_cell=episodes_per_cell,
        target_speeds=list(target_speeds),
        failures=int(sum(ep.failed for ep in episodes)),
        mean_reward=float(np.mean(np.concatenate([ep.rewards for ep in episodes]))) if episodes else 0.0,
        sha256=hashlib.sha256(blob).hexdigest(),
    )
    manifest_path(out).write_text(manifest.to_json())
    return manifest


def manifest_path(dataset_path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.name + ".manifest.json")


def read_manifest(dataset_path) -> DatasetManifest:
    return DatasetManifest(**json.loads(manifest_path(dataset_path).read_text()))
