"""Evaluation grid, metrics, baseline controllers and ablation tables.

A policy source is anything with ``reset(n, embodiment)`` and
``act_batch(masks) -> (n, 2)`` normalized commands. Episodes of one grid cell
run in lockstep so learned policies can batch their forward passes; every cell
uses the same scenario seeds, so cells differ only in embodiment and target
speed.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from . import tracksim as ts
from .datagen import PIDExpert, PIDGains
from .tracksim import ActionCommand, EmbodimentConfig, RewardSpec, Scenario

TEST_HEIGHTS = (0.3, 1.0, 1.7, 3.0)
TEST_SPEEDS = (0.5, 1.0, 2.0, 3.0)
VARIANT_ORDER = ("full", "no_context_id", "no_consistency", "no_context", "no_lstm")
VARIANT_LABELS = {
    "full": "Full model",
    "no_context_id": "w/o context identification",
    "no_consistency": "w/o temporal consistency",
    "no_context": "w/o context encoding",
    "no_lstm": "w/o LSTM",
}


class PolicySource(Protocol):
    def reset(self, n: int, embodiment: EmbodimentConfig) -> None: ...

    def act_batch(self, masks: np.ndarray) -> np.ndarray: ...


# ------------------------------------------------------------------ results

@dataclass
class EpisodeResult:
    seed: int
    ar: float
    length: int
    success: bool
    rewards: np.ndarray = field(repr=False, default=None)
    lost: np.ndarray = field(repr=False, default=None)


@dataclass
class CellResult:
    height: float
    speed: float
    episodes: list

    @property
    def ar(self) -> float:
        return float(np.mean([e.ar for e in self.episodes]))

    @property
    def el(self) -> float:
        return float(np.mean([e.length for e in self.episodes]))

    @property
    def sr(self) -> float:
        return float(np.mean([e.success for e in self.episodes]))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


@dataclass
class GridReport:
    """Per-(height, speed) AR/EL/SR. Grid std is the population std over cell means."""

    name: str
    cells: list

    def cell(self, height: float, speed: float) -> CellResult:
        for c in self.cells:
            if c.height == height and c.speed == speed:
                return c
        raise KeyError((height, speed))

    @property
    def heights(self) -> list:
        return sorted({c.height for c in self.cells})

    @property
    def speeds(self) -> list:
        return sorted({c.speed for c in self.cells})

    def summary(self, metric: str) -> tuple[float, float]:
        vals = np.array([getattr(c, metric) for c in self.cells])
        return float(vals.mean()), float(vals.std(ddof=0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", "height", "speed", "episodes", "AR", "EL", "SR"])
        for c in self.cells:
            w.writerow([self.name, c.height, c.speed, len(c.episodes), _fmt(c.ar), _fmt(c.el), _fmt(c.sr)])
        for metric in ("ar", "el", "sr"):
            mean, std = self.summary(metric)
            w.writerow([self.name, "mean", metric.upper(), "", _fmt(mean), _fmt(std), ""])
        return buf.getvalue()

    def to_text(self) -> str:
        """Rows are camera heights, columns target speeds; each entry is AR/EL/SR."""
        cols = [f"{s:g} m/s" for s in self.speeds] + ["Mean ± std"]
        rows = []
        for h in self.heights:
            entries = []
            for s in self.speeds:
                c = self.cell(h, s)
                entries.append(f"{c.ar:.0f}/{c.el:.0f}/{c.sr:.2f}")
            sub = [c for c in self.cells if c.height == h]
            entries.append("/".join(
                f"{np.mean([getattr(c, m) for c in sub]):.{p}f}±{np.std([getattr(c, m) for c in sub]):.{p}f}"
                for m, p in (("ar", 0), ("el", 0), ("sr", 2))))
            rows.append([f"h={h:g} m"] + entries)
        header = [self.name] + cols
        widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
        lines = ["  ".join(str(v).ljust(wd) for v, wd in zip(r, widths)) for r in [header] + rows]
        ar, el, sr = (self.summary(m) for m in ("ar", "el", "sr"))
        lines.append(f"grid mean ± std: AR {ar[0]:.1f}±{ar[1]:.1f}  EL {el[0]:.1f}±{el[1]:.1f}  "
                     f"SR {sr[0]:.3f}±{sr[1]:.3f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: Optional[str] = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.name
        csv_path, txt_path = out / f"{stem}.csv", out / f"{stem}.txt"
        csv_path.write_text(self.to_csv())
        txt_path.write_text(self.to_text())
        return csv_path, txt_path


def replay_protocol(lost: Sequence[bool], lost_limit: int = 50, max_steps: int = 500) -> tuple[int, bool]:
    """(length, success) of an episode with the given per-step lost flags under a termination protocol."""
    run = 0
    for t, flag in enumerate(lost[:max_steps]):
        run = run + 1 if flag else 0
        if run >= lost_limit:
            return t + 1, False
    n = min(len(lost), max_steps)
    return n, n >= max_steps


# ------------------------------------------------------------------ rollouts

def cell_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def run_episodes(policy: PolicySource, embodiment: EmbodimentConfig, scenario: Scenario,
                 seeds: Sequence[int], trace_dir=None, trace_prefix: str = "") -> list[EpisodeResult]:
    n = len(seeds)
    states, masks = [], []
    for s in seeds:
        st, m = ts.reset(embodiment, s, scenario)
        states.append(st)
        masks.append(m)
    policy.reset(n, embodiment)
    rewards = [[] for _ in range(n)]
    lost = [[] for _ in range(n)]
    traces = [[] for _ in range(n)] if trace_dir is not None else None
    active = [True] * n
    while any(active):
        acts = np.asarray(policy.act_batch(np.stack(masks)), dtype=np.float64)
        for i in range(n):
            if not active[i]:
                continue
            cmd = ActionCommand(float(acts[i, 0]), float(acts[i, 1]))
            res = ts.step(states[i], cmd, embodiment, scenario)
            states[i], masks[i] = res.state, res.mask
            rewards[i].append(res.reward)
            lost[i].append(res.info["lost"])
            if traces is not None:
                traces[i].append(ts.TraceRow(res.state.t, res.info["rho"], res.info["theta"], cmd.v_norm,
                                             cmd.omega_norm, res.reward, res.info["lost"]))
            if res.terminated:
                active[i] = False
    results = []
    for i, s in enumerate(seeds):
        r = np.array(rewards[i])
        results.append(EpisodeResult(s, float(r.sum()), len(r), not states[i].failed, r, np.array(lost[i])))
        if traces is not None:
            path = Path(trace_dir) / f"{trace_prefix}seed{s}.jsonl"
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w") as fh:
                ts.write_trace(traces[i], fh)
    return results


def _run_cell(args) -> CellResult:
    factory, base, scenario, h, v, seeds, trace_dir = args
    emb = base.replace(camera_height=float(h))
    sc = dataclasses.replace(scenario, target_speed=float(v))
    prefix = f"h{h:g}_v{v:g}_"
    return CellResult(float(h), float(v), run_episodes(factory(), emb, sc, seeds, trace_dir, prefix))


def run_grid(factory: Callable[[], PolicySource], heights: Sequence[float] = TEST_HEIGHTS,
             speeds: Sequence[float] = TEST_SPEEDS, episodes_per_cell: int = 10, seed: int = 0,
             base: EmbodimentConfig = EmbodimentConfig(), scenario: Scenario = Scenario(),
             name: str = "policy", trace_dir=None, jobs: int = 1) -> GridReport:
    """Evaluate a policy over heights x target speeds.

    ``factory`` builds a fresh policy source (it must be picklable when jobs > 1).
    """
    seeds = cell_seeds(seed, episodes_per_cell)
    tasks = [(factory, base, scenario, h, v, seeds, trace_dir) for h in heights for v in speeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, tasks))
    else:
        cells = [_run_cell(t) for t in tasks]
    return GridReport(name, cells)


# ------------------------------------------------------------------ simple policies

class ConstantPolicy:
    def __init__(self, v_norm: float = 0.0, omega_norm: float = 0.0):
        self.cmd = np.array([v_norm, omega_norm], dtype=np.float64)

    def reset(self, n: int, embodiment: EmbodimentConfig = None) -> None:
        self.n = n

    def act_batch(self, masks: np.ndarray) -> np.ndarray:
        return np.tile(self.cmd, (len(masks), 1))


def zero_policy() -> ConstantPolicy:
    return ConstantPolicy(0.0, 0.0)


def reverse_turn_policy() -> ConstantPolicy:
    """Full reverse command with a full turn: the target leaves the view and never returns."""
    return ConstantPolicy(-1.0, -1.0)


class TurnAwayPolicy:
    """Turns at full rate until the target is out of view for good, then stops."""

    def __init__(self, turn_steps: int = 20):
        self.turn_steps = turn_steps

    def reset(self, n: int, embodiment: EmbodimentConfig = None) -> None:
        self.t = 0

    def act_batch(self, masks: np.ndarray) -> np.ndarray:
        omega = 1.0 if self.t < self.turn_steps else 0.0
        self.t += 1
        return np.tile([0.0, omega], (len(masks), 1))


# ------------------------------------------------------------------ bounding boxes and MR

@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float


def bounding_box(mask: np.ndarray, label: int = ts.TARGET) -> Optional[BoundingBox]:
    """Tight box of ``label`` pixels, normalized by the image size; None when absent."""
    rows = np.flatnonzero((mask == label).any(axis=1))
    cols = np.flatnonzero((mask == label).any(axis=0))
    if len(rows) == 0:
        return None
    H, W = mask.shape
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    return BoundingBox((c0 + c1) / 2 / W, (r0 + r1) / 2 / H, (c1 - c0) / W, (r1 - r0) / H)


def box_reward(box: Optional[BoundingBox], init: BoundingBox) -> float:
    if box is None:
        return 0.0
    dc = math.hypot(box.cx - init.cx, box.cy - init.cy)
    ds = math.hypot(box.w - init.w, box.h - init.h)
    return 1.0 / (1.0 + dc + ds)


def mr_from_boxes(boxes: Sequence[Optional[BoundingBox]], init: Optional[BoundingBox] = None) -> float:
    """Mean of 1 / (1 + center deviation + size deviation); the first box is the reference by default."""
    init = init if init is not None else boxes[0]
    if init is None:
        raise ValueError("MR needs a visible target in the initial frame")
    return float(np.mean([box_reward(b, init) for b in boxes]))


def mr_metric(masks: Sequence[np.ndarray]) -> float:
    """MR over a mask trace; steps without target pixels contribute 0."""
    if len(masks) == 0:
        raise ValueError("empty trace")
    return mr_from_boxes([bounding_box(m) for m in masks])


# ------------------------------------------------------------------ PID baseline

def reference_box_height(embodiment: EmbodimentConfig) -> float:
    """Target box height in pixels with the target at the desired pose (rho*, 0)."""
    state, mask = ts.reset(embodiment, 0, Scenario(obstacle_count=0, pattern="static"))
    box = bounding_box(mask)
    if box is None:
        raise ValueError(f"target not visible at the reference pose for {embodiment}")
    return box.h * embodiment.mask_h


class PIDBaseline:
    """Mask tracker plus the PID controller used for the expert data.

    Bearing comes from the target centroid column through the pinhole model;
    distance from the box height relative to a per-embodiment reference frame.
    With no target pixels it keeps the last linear command and turns toward the
    side the target was last seen on.
    """

    def __init__(self, gains: PIDGains = PIDGains()):
        self.gains = gains

    def reset(self, n: int, embodiment: EmbodimentConfig) -> None:
        self.emb = embodiment
        self.ref_h = reference_box_height(embodiment)
        self.ctrl = [PIDExpert(self.gains) for _ in range(n)]
        self.last = np.zeros((n, 2))
        self.side = np.ones(n)

    def estimate(self, mask: np.ndarray) -> Optional[tuple[float, float]]:
        ys, xs = np.nonzero(mask == ts.TARGET)
        if len(xs) == 0:
            return None
        u = xs.mean() + 0.5
        theta = math.atan((self.emb.mask_w / 2.0 - u) / self.emb.focal)
        box_h = ys.max() - ys.min() + 1
        rho = RewardSpec.rho_star * self.ref_h / box_h
        return rho, theta

    def act_batch(self, masks: np.ndarray) -> np.ndarray:
        out = np.zeros((len(masks), 2))
        for i, m in enumerate(masks):
            est = self.estimate(m)
            if est is None:
                out[i] = (self.last[i, 0], self.side[i])
            else:
                cmd = self.ctrl[i](*est)
                out[i] = (cmd.v_norm, cmd.omega_norm)
                self.side[i] = 1.0 if est[1] >= 0 else -1.0
            self.last[i] = out[i]
        return out

    def act(self, mask: np.ndarray) -> ActionCommand:
        if not hasattr(self, "ctrl"):
            raise RuntimeError("call reset() with the embodiment first")
        a = self.act_batch(np.asarray(mask)[None])[0]
        return ActionCommand(float(a[0]), float(a[1]))


# ------------------------------------------------------------------ ablation table

def ablation_report(reports: dict) -> str:
    """Mean AR/EL/SR per variant in the canonical row order, with deltas against the full model.

    Missing variants (absent key or None) are listed as absent.
    """
    rows = [["Variant", "AR", "EL", "SR", "dAR", "dEL", "dSR"]]
    full = reports.get("full")
    ref = {m: full.summary(m)[0] for m in ("ar", "el", "sr")} if full is not None else None
    names = list(VARIANT_ORDER) + [k for k in reports if k not in VARIANT_ORDER]
    for name in names:
        label = VARIANT_LABELS.get(name, name)
        rep = reports.get(name)
        if rep is None:
            rows.append([label, "absent", "", "", "", "", ""])
            continue
        vals = {m: rep.summary(m)[0] for m in ("ar", "el", "sr")}
        deltas = ["" if ref is None else f"{vals[m] - ref[m]:+.{p}f}" for m, p in (("ar", 1), ("el", 1), ("sr", 3))]
        rows.append([label, f"{vals['ar']:.1f}", f"{vals['el']:.1f}", f"{vals['sr']:.3f}"] + deltas)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows) + "\n"
