"""Kinematic tracking environment with configurable embodiments.

An agent with a hidden embodiment (camera height, velocity bounds, actuation
lag) follows a moving target. The agent observes only a segmentation mask
rendered through a pinhole camera; reward and termination are computed from the
ground-truth relative polar position of the target.

Frames: world x/y on the ground plane, z up. The agent frame has x forward and
y to the left, so a positive bearing means the target is to the left.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional

import numpy as np

DT = 0.1
BACKGROUND, OBSTACLE, TARGET = 0, 128, 255

TARGET_HEIGHT = 1.7
TARGET_RADIUS = 0.25
TARGET_AIM_HEIGHT = TARGET_HEIGHT / 2
OBSTACLE_HEIGHT = 1.0
AGENT_RADIUS = 0.3
NEAR_PLANE = 0.1
_CIRCLE_SAMPLES = 48


@dataclass(frozen=True)
class EmbodimentConfig:
    camera_height: float = 1.0
    v_max: float = 1.0
    omega_max: float = math.pi / 2
    inertia_tau: float = 0.2
    fov_h: float = math.pi / 2
    mask_w: int = 64
    mask_h: int = 64

    def __post_init__(self):
        if self.camera_height <= 0 or self.v_max <= 0 or self.omega_max <= 0:
            raise ValueError(f"invalid embodiment {self}: height and velocity bounds must be positive")
        if self.inertia_tau < 0:
            raise ValueError(f"invalid embodiment {self}: inertia_tau must be >= 0")
        if not 0 < self.fov_h < math.pi:
            raise ValueError(f"invalid embodiment {self}: fov_h must lie in (0, pi)")
        if self.mask_w < 4 or self.mask_h < 4:
            raise ValueError(f"invalid embodiment {self}: mask must be at least 4x4")

    @property
    def pitch(self) -> float:
        """Downward camera pitch aiming at the target's mid-height at the desired distance."""
        return math.atan2(self.camera_height - TARGET_AIM_HEIGHT, RewardSpec.rho_star)

    @property
    def focal(self) -> float:
        return (self.mask_w / 2.0) / math.tan(self.fov_h / 2.0)

    def replace(self, **changes) -> "EmbodimentConfig":
        return dataclasses.replace(self, **changes)


class RewardSpec:
    rho_star = 2.5
    theta_star = 0.0
    rho_max = 7.5
    theta_max = math.pi / 4


def reward(rho: float, theta: float) -> float:
    return (
        1.0
        - abs(rho - RewardSpec.rho_star) / RewardSpec.rho_max
        - abs(theta - RewardSpec.theta_star) / RewardSpec.theta_max
    )


def is_lost(rho: float, theta: float, fov_h: float = math.pi / 2) -> bool:
    return rho > RewardSpec.rho_max or abs(theta) > fov_h / 2


@dataclass(frozen=True)
class Scenario:
    """Per-episode task parameters that are not part of the embodiment."""

    target_speed: float = 1.0
    pattern: str = "random"  # random | s_curve | static
    obstacle_count: int = 2
    waypoint_radius: float = 15.0
    min_leg: float = 2.0
    max_steps: int = 500
    lost_limit: int = 50

    def __post_init__(self):
        if self.pattern not in ("random", "s_curve", "static"):
            raise ValueError(f"unknown target pattern {self.pattern!r}")
        if self.target_speed < 0 or self.max_steps < 1 or self.lost_limit < 1:
            raise ValueError(f"invalid scenario {self}")


@dataclass(frozen=True)
class ActionCommand:
    v_norm: float
    omega_norm: float

    def clamped(self) -> "ActionCommand":
        return ActionCommand(float(np.clip(self.v_norm, -1, 1)), float(np.clip(self.omega_norm, -1, 1)))

    def as_array(self) -> np.ndarray:
        return np.array([self.v_norm, self.omega_norm])


@dataclass
class WorldState:
    agent: np.ndarray  # x, y, yaw
    velocity: np.ndarray  # v, omega actually executed
    target: np.ndarray  # x, y
    target_velocity: np.ndarray
    obstacles: np.ndarray  # (n, 3): x, y, radius
    t: int = 0
    consecutive_lost: int = 0
    terminated: bool = False
    failed: bool = False
    prev_polar: tuple = (0.0, 0.0)
    waypoint: Optional[np.ndarray] = None
    plan: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    plan_index: int = 0

    def copy(self) -> "WorldState":
        return dataclasses.replace(
            self,
            agent=self.agent.copy(),
            velocity=self.velocity.copy(),
            target=self.target.copy(),
            target_velocity=self.target_velocity.copy(),
            waypoint=None if self.waypoint is None else self.waypoint.copy(),
        )

    def polar(self) -> tuple[float, float]:
        return relative_polar(self.agent, self.target)


def relative_polar(agent: np.ndarray, target: np.ndarray, eps: float = 1e-9) -> tuple[float, float]:
    dx, dy = target[0] - agent[0], target[1] - agent[1]
    c, s = math.cos(agent[2]), math.sin(agent[2])
    fwd = c * dx + s * dy
    left = -s * dx + c * dy
    rho = math.hypot(fwd, left)
    if rho < eps:
        return rho, 0.0
    return rho, math.atan2(left, fwd)


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass
class StepResult:
    state: WorldState
    mask: np.ndarray
    reward: float
    terminated: bool
    info: dict


# ------------------------------------------------------------------ scenario

def _sample_obstacles(rng: np.random.Generator, count: int) -> np.ndarray:
    spawn = np.array([RewardSpec.rho_star, 0.0])
    obstacles: list[tuple[float, float, float]] = []
    attempts = 0
    while len(obstacles) < count and attempts < 1000:
        attempts += 1
        r = rng.uniform(0.3, 0.6)
        x, y = rng.uniform(-8.0, 8.0, size=2)
        p = np.array([x, y])
        if np.hypot(x, y) < r + 1.0 or np.linalg.norm(p - spawn) < r + 1.0:
            continue
        # keep the initial line of sight clear
        if -r < x < spawn[0] + r and abs(y) < r + 0.3:
            continue
        if any(np.hypot(x - ox, y - oy) < r + orad + 0.2 for ox, oy, orad in obstacles):
            continue
        obstacles.append((x, y, r))
    return np.array(obstacles, dtype=float).reshape(-1, 3)


def _target_plan(rng: np.random.Generator, scenario: Scenario) -> np.ndarray:
    if scenario.pattern == "random":
        # unit-disc offsets, scaled around the agent's position when consumed
        radius = np.sqrt(rng.uniform(0.0, 1.0, size=256))
        angle = rng.uniform(-math.pi, math.pi, size=256)
        return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    if scenario.pattern == "s_curve":
        amp = rng.uniform(1.5, 2.5)
        leg = rng.uniform(3.0, 5.0)
        k = np.arange(1, 201)
        return np.stack([RewardSpec.rho_star + leg * k, amp * np.where(k % 2, 1.0, -1.0)], axis=1)
    return np.zeros((0, 2))


def _next_waypoint(state: WorldState, scenario: Scenario) -> Optional[np.ndarray]:
    if scenario.pattern == "static" or len(state.plan) == 0:
        return None
    if scenario.pattern == "s_curve":
        idx = state.plan_index % len(state.plan)
        state.plan_index += 1
        return state.plan[idx].copy()
    for _ in range(len(state.plan)):
        offset = state.plan[state.plan_index % len(state.plan)]
        state.plan_index += 1
        wp = state.agent[:2] + scenario.waypoint_radius * offset
        if np.linalg.norm(wp - state.target) >= scenario.min_leg:
            return wp
    return state.agent[:2] + scenario.waypoint_radius * state.plan[0]


def reset(embodiment: EmbodimentConfig, scenario_seed: int,
          scenario: Scenario = Scenario()) -> tuple[WorldState, np.ndarray]:
    """Spawn the agent at the origin facing a target at the desired pose."""
    rng = np.random.default_rng(scenario_seed)
    obstacles = _sample_obstacles(rng, scenario.obstacle_count)
    plan = _target_plan(rng, scenario)
    state = WorldState(
        agent=np.zeros(3),
        velocity=np.zeros(2),
        target=np.array([RewardSpec.rho_star, 0.0]),
        target_velocity=np.zeros(2),
        obstacles=obstacles,
        plan=plan,
    )
    state.prev_polar = state.polar()
    state.waypoint = _next_waypoint(state, scenario)
    return state, render_mask(state, embodiment)


def _blocked(pos: np.ndarray, obstacles: np.ndarray) -> bool:
    if len(obstacles) == 0:
        return False
    d = np.hypot(obstacles[:, 0] - pos[0], obstacles[:, 1] - pos[1])
    return bool(np.any(d < obstacles[:, 2] + AGENT_RADIUS))


def _advance_target(state: WorldState, scenario: Scenario) -> None:
    budget = scenario.target_speed * DT
    start = state.target.copy()
    # a fast target can pass several waypoints within one control period
    for _ in range(8):
        if state.waypoint is None or budget <= 0:
            break
        delta = state.waypoint - state.target
        dist = float(np.hypot(*delta))
        if dist > budget:
            state.target = state.target + delta / dist * budget
            break
        state.target = state.waypoint.copy()
        budget -= dist
        state.waypoint = _next_waypoint(state, scenario)
    state.target_velocity = (state.target - start) / DT


def step(state: WorldState, action: ActionCommand, embodiment: EmbodimentConfig,
         scenario: Scenario = Scenario()) -> StepResult:
    """Advance one control period; the input state is not modified."""
    if state.terminated:
        raise RuntimeError("step() called on a terminated episode; call reset()")
    s = state.copy()
    s.prev_polar = state.polar()
    a = action.clamped()
    v_cmd = max(0.0, a.v_norm) * embodiment.v_max
    w_cmd = a.omega_norm * embodiment.omega_max
    if embodiment.inertia_tau > 0:
        keep = math.exp(-DT / embodiment.inertia_tau)
        s.velocity = s.velocity * keep + np.array([v_cmd, w_cmd]) * (1.0 - keep)
    else:
        s.velocity = np.array([v_cmd, w_cmd])
    v, w = s.velocity
    x, y, yaw = s.agent
    nxt = np.array([x + v * math.cos(yaw) * DT, y + v * math.sin(yaw) * DT])
    blocked = _blocked(nxt, s.obstacles)
    if blocked:
        nxt = np.array([x, y])
        s.velocity[0] = 0.0
    s.agent = np.array([nxt[0], nxt[1], wrap_angle(yaw + w * DT)])
    _advance_target(s, scenario)
    s.t += 1

    rho, theta = s.polar()
    r = reward(rho, theta)
    lost = is_lost(rho, theta, embodiment.fov_h)
    s.consecutive_lost = s.consecutive_lost + 1 if lost else 0
    if s.consecutive_lost >= scenario.lost_limit:
        s.terminated = s.failed = True
    elif s.t >= scenario.max_steps:
        s.terminated = True
    info = {"rho": rho, "theta": theta, "lost": lost, "blocked": blocked,
            "success": s.terminated and not s.failed, "failed": s.failed}
    return StepResult(s, render_mask(s, embodiment), r, s.terminated, info)


def privileged_state(state: WorldState) -> tuple[float, float, float, float]:
    """Exact (rho, theta) and their rates over the last control period."""
    rho, theta = state.polar()
    prho, ptheta = state.prev_polar
    return rho, theta, (rho - prho) / DT, wrap_angle(theta - ptheta) / DT


# ------------------------------------------------------------------ rendering

def _camera_project(points_agent: np.ndarray, emb: EmbodimentConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project agent-frame points (N, 3) to pixel coordinates and depth."""
    p = emb.pitch
    cp, sp = math.cos(p), math.sin(p)
    X, Y, Z = points_agent[:, 0], points_agent[:, 1], points_agent[:, 2] - emb.camera_height
    depth = X * cp - Z * sp
    up = X * sp + Z * cp
    f = emb.focal
    safe = np.where(depth > 0, depth, 1.0)
    u = emb.mask_w / 2.0 - f * Y / safe
    v = emb.mask_h / 2.0 - f * up / safe
    return u, v, depth


def _cylinder_points(cx: float, cy: float, radius: float, height: float) -> np.ndarray:
    phi = np.linspace(0.0, 2 * math.pi, _CIRCLE_SAMPLES, endpoint=False)
    ring = np.stack([cx + radius * np.cos(phi), cy + radius * np.sin(phi)], axis=1)
    bottom = np.column_stack([ring, np.zeros(len(phi))])
    top = np.column_stack([ring, np.full(len(phi), height)])
    return np.vstack([bottom, top])


def projected_box(agent: np.ndarray, center: np.ndarray, radius: float, height: float,
                  emb: EmbodimentConfig) -> Optional[tuple[float, float, float, float]]:
    """Continuous image rectangle (u0, u1, v0, v1) of a vertical cylinder, or None if not in front."""
    dx, dy = center[0] - agent[0], center[1] - agent[1]
    c, s = math.cos(agent[2]), math.sin(agent[2])
    pts = _cylinder_points(c * dx + s * dy, -s * dx + c * dy, radius, height)
    u, v, depth = _camera_project(pts, emb)
    if depth.min() < NEAR_PLANE:
        return None
    return float(u.min()), float(u.max()), float(v.min()), float(v.max())


def rasterize_box(mask: np.ndarray, box, label: int) -> None:
    """Fill pixels whose centers fall inside the box, clipped to the image."""
    h, w = mask.shape
    u0, u1, v0, v1 = box
    j0 = max(0, math.ceil(u0 - 0.5))
    j1 = min(w - 1, math.floor(u1 - 0.5))
    i0 = max(0, math.ceil(v0 - 0.5))
    i1 = min(h - 1, math.floor(v1 - 0.5))
    if j0 <= j1 and i0 <= i1:
        mask[i0: i1 + 1, j0: j1 + 1] = label


def render_mask(state: WorldState, embodiment: EmbodimentConfig) -> np.ndarray:
    """Segmentation mask (mask_h, mask_w) of uint8 labels {0, 128, 255}."""
    mask = np.zeros((embodiment.mask_h, embodiment.mask_w), dtype=np.uint8)
    if len(state.obstacles):
        order = np.argsort(-np.hypot(state.obstacles[:, 0] - state.agent[0],
                                     state.obstacles[:, 1] - state.agent[1]), kind="stable")
        for ox, oy, orad in state.obstacles[order]:
            box = projected_box(state.agent, (ox, oy), orad, OBSTACLE_HEIGHT, embodiment)
            if box is not None:
                rasterize_box(mask, box, OBSTACLE)
    box = projected_box(state.agent, state.target, TARGET_RADIUS, TARGET_HEIGHT, embodiment)
    if box is not None:
        rasterize_box(mask, box, TARGET)
    return mask


# ------------------------------------------------------------------ env + I/O

class TrackingEnv:
    """Stateful convenience wrapper around :func:`reset` / :func:`step`. Not thread-safe."""

    def __init__(self, embodiment: EmbodimentConfig, scenario: Scenario = Scenario()):
        self.embodiment = embodiment
        self.scenario = scenario
        self.state: Optional[WorldState] = None

    def reset(self, seed: int) -> np.ndarray:
        self.state, mask = reset(self.embodiment, seed, self.scenario)
        return mask

    def step(self, action: ActionCommand) -> StepResult:
        result = step(self.state, action, self.embodiment, self.scenario)
        self.state = result.state
        return result


@dataclass
class TraceRow:
    t: int
    rho: float
    theta: float
    v_norm: float
    omega_norm: float
    reward: float
    lost: bool


def write_trace(rows: Iterable[TraceRow], fh: IO[str]) -> None:
    """One JSON object per line; the format consumed by plotting scripts."""
    for row in rows:
        fh.write(json.dumps(dataclasses.asdict(row)) + "\n")


def read_trace(fh: IO[str]) -> list[TraceRow]:
    return [TraceRow(**json.loads(line)) for line in fh if line.strip()]
