"""Embodiment context encoder and its auxiliary objectives.

The encoder ``f`` reads the last K (mask, action) pairs and summarizes them into
a context vector ``z``. A small head ``g`` predicts the reward of the current
state and the camera height from ``z``; it only exists to shape ``z`` during
training and is never used when acting.

Histories are addressed by index: masks are run through the CNN once per unique
frame, and an ``(N, K)`` integer index (``-1`` for pre-episode slots) gathers
the per-slot features. Padded slots get zero features and zero actions plus a
padding flag, so an empty history always encodes to the same vector ``z_0``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numgrad import ops
from .numgrad import nn
from .numgrad.nn import ParamStore
from .numgrad.tensor import Tensor, no_grad

ACTION_DIM = 2
SPAWN_REWARD = 1.0  # reward of the spawn pose (rho*, 0)


@dataclass(frozen=True)
class EncoderConfig:
    K: int = 8
    d_z: int = 16
    mask_h: int = 32
    mask_w: int = 32
    feat_dim: int = 32
    lstm_hidden: int = 32
    aux_hidden: int = 32
    height_scale: float = 3.0

    def __post_init__(self):
        if self.K < 1 or self.d_z < 1:
            raise ValueError(f"invalid encoder config {self}")


# ------------------------------------------------------------------ CNN

def cnn_output_hw(h: int, w: int) -> tuple[int, int]:
    for _ in range(2):
        h, w = (h - 3) // 2 + 1, (w - 3) // 2 + 1
    return h, w


def add_cnn(store: ParamStore, prefix: str, mask_h: int, mask_w: int, feat_dim: int,
            rng: np.random.Generator) -> None:
    """Two 3x3 stride-2 conv layers (8 and 16 channels) and a linear projection."""
    nn.add_conv(store, f"{prefix}/c0", 1, 8, 3, rng)
    nn.add_conv(store, f"{prefix}/c1", 8, 16, 3, rng)
    oh, ow = cnn_output_hw(mask_h, mask_w)
    nn.add_linear(store, f"{prefix}/fc", 16 * oh * ow, feat_dim, rng)


def normalize_masks(masks: np.ndarray) -> np.ndarray:
    return np.asarray(masks, dtype=np.float64) / 255.0


def cnn_features(store: ParamStore, prefix: str, masks: np.ndarray) -> Tensor:
    """uint8 masks (N, H, W) -> relu features (N, feat_dim)."""
    x = Tensor(normalize_masks(masks)[:, None])
    x = ops.relu(nn.conv(store, f"{prefix}/c0", x, stride=2))
    x = ops.relu(nn.conv(store, f"{prefix}/c1", x, stride=2))
    x = ops.reshape(x, (x.shape[0], -1))
    return ops.relu(nn.linear(store, f"{prefix}/fc", x))


# ------------------------------------------------------------------ histories

@dataclass
class ContextHistory:
    """K mask-action slots ending just before step t; ``padded`` marks slots before the episode."""

    masks: np.ndarray  # (K, H, W) uint8
    actions: np.ndarray  # (K, 2)
    padded: np.ndarray  # (K,) bool

    @classmethod
    def empty(cls, K: int, h: int, w: int) -> "ContextHistory":
        return cls(np.zeros((K, h, w), np.uint8), np.zeros((K, ACTION_DIM)), np.ones(K, bool))

    @property
    def K(self) -> int:
        return len(self.padded)


def history_at(masks: np.ndarray, actions: np.ndarray, t: int, K: int) -> ContextHistory:
    """History for step t of an episode: slots t-K .. t-1, zero-filled before step 0."""
    h, w = masks.shape[1:]
    hist = ContextHistory.empty(K, h, w)
    for k in range(K):
        tau = t - K + k
        if 0 <= tau < len(masks):
            hist.masks[k] = masks[tau]
            hist.actions[k] = actions[tau]
            hist.padded[k] = False
    return hist


def history_index(steps: np.ndarray, K: int, offset: int = 0) -> np.ndarray:
    """(N, K) frame indices for the given episode steps; pre-episode slots are -1."""
    steps = np.asarray(steps, dtype=np.int64)
    tau = steps[:, None] - K + np.arange(K)[None, :]
    return np.where(tau >= 0, tau + offset, -1)


# ------------------------------------------------------------------ encoder

def init_encoder(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    add_cnn(store, "encoder/cnn", cfg.mask_h, cfg.mask_w, cfg.feat_dim, rng)
    nn.add_lstm(store, "encoder/lstm", cfg.feat_dim + ACTION_DIM + 1, cfg.lstm_hidden, rng)
    nn.add_linear(store, "encoder/proj", cfg.lstm_hidden, cfg.d_z, rng)
    nn.add_mlp(store, "aux", [cfg.d_z, cfg.aux_hidden, 2], rng)


def encode_from_features(store: ParamStore, cfg: EncoderConfig, feats: Tensor,
                         actions: np.ndarray, index: np.ndarray) -> Tensor:
    """Run the slot LSTM over gathered frame features.

    feats: (F, feat_dim) features of F frames; actions: (F, 2) actions taken at
    those frames; index: (N, K) rows into them, -1 for padding. Returns (N, d_z).
    """
    index = np.asarray(index)
    if index.ndim != 2 or index.shape[1] != cfg.K:
        raise ValueError(f"history index must have shape (N, {cfg.K}), got {index.shape}")
    n_frames = feats.shape[0]
    padded = ops.concat([feats, Tensor(np.zeros((1, feats.shape[1])))], axis=0)
    act = np.concatenate([np.asarray(actions, dtype=np.float64).reshape(-1, ACTION_DIM),
                          np.zeros((1, ACTION_DIM))], axis=0)
    rows = np.where(index < 0, n_frames, index)
    n = index.shape[0]
    h = nn.zeros(n, cfg.lstm_hidden)
    c = nn.zeros(n, cfg.lstm_hidden)
    w_x, w_h, b = store["encoder/lstm/w_x"], store["encoder/lstm/w_h"], store["encoder/lstm/b"]
    for k in range(cfg.K):
        r = rows[:, k]
        extra = np.concatenate([act[r], (index[:, k] < 0).astype(np.float64)[:, None]], axis=1)
        x = ops.concat([ops.getitem(padded, r), Tensor(extra)], axis=1)
        h, c = nn.lstm_cell(x, h, c, w_x, w_h, b)
    return nn.linear(store, "encoder/proj", h)


def encode_frames(store: ParamStore, cfg: EncoderConfig, frames: np.ndarray,
                  actions: np.ndarray, index: np.ndarray) -> Tensor:
    feats = cnn_features(store, "encoder/cnn", frames) if len(frames) else \
        Tensor(np.zeros((0, cfg.feat_dim)))
    return encode_from_features(store, cfg, feats, actions, index)


def encode_context(store: ParamStore, cfg: EncoderConfig,
                   histories: ContextHistory | Sequence[ContextHistory]) -> Tensor:
    """Context vectors for one history (returns (d_z,)) or a list of them ((N, d_z))."""
    single = isinstance(histories, ContextHistory)
    hs = [histories] if single else list(histories)
    for hist in hs:
        if hist.K != cfg.K:
            raise ValueError(f"history has {hist.K} slots, encoder expects {cfg.K}")
    frames = np.concatenate([hist.masks for hist in hs], axis=0)
    actions = np.concatenate([hist.actions for hist in hs], axis=0)
    base = np.arange(len(hs))[:, None] * cfg.K + np.arange(cfg.K)[None, :]
    padded = np.stack([hist.padded for hist in hs])
    index = np.where(padded, -1, base)
    z = encode_frames(store, cfg, frames, actions, index)
    return z[0] if single else z


def episode_contexts(store: ParamStore, cfg: EncoderConfig, masks: np.ndarray,
                     actions: np.ndarray, steps: Optional[np.ndarray] = None) -> Tensor:
    """z_t for the requested steps of one episode (default: every step)."""
    steps = np.arange(len(masks)) if steps is None else np.asarray(steps)
    return encode_frames(store, cfg, masks, actions, history_index(steps, cfg.K))


# ------------------------------------------------------------------ auxiliary head and losses

def aux_predict(store: ParamStore, z: Tensor) -> tuple[Tensor, Tensor]:
    """(r_hat, h_hat / height_scale) for a batch of contexts (N, d_z)."""
    out = nn.mlp(store, "aux", z, 2)
    return out[:, 0], out[:, 1]


def state_rewards(rewards: np.ndarray) -> np.ndarray:
    """Reward of the state each step observes: the spawn reward, then the logged rewards shifted by one."""
    return np.concatenate([[SPAWN_REWARD], np.asarray(rewards, dtype=np.float64)])


def identification_losses(store: ParamStore, cfg: EncoderConfig, z: Tensor,
                          reward_targets: np.ndarray, heights: np.ndarray) -> tuple[Tensor, Tensor]:
    r_hat, h_hat = aux_predict(store, z)
    l_reward = ops.squared_error(r_hat, np.asarray(reward_targets, dtype=np.float64))
    l_height = ops.squared_error(h_hat, np.asarray(heights, dtype=np.float64) / cfg.height_scale)
    return l_reward, l_height


def consistency_loss(early: Sequence[Tensor], means: Sequence[Tensor], eps: float = 1e-8) -> Tensor:
    """Mean over episodes of 1 - mean_k cos(z_k, z_bar).

    early[e]: (k_e, d) early contexts of episode e; means[e]: (d,) its average context.
    """
    if len(early) != len(means) or not early:
        raise ValueError("consistency_loss needs one mean per episode and at least one episode")
    terms = []
    for z_e, z_bar in zip(early, means):
        cos = ops.cosine_similarity(z_e, ops.expand(z_bar, z_e.shape[0]), axis=-1, eps=eps)
        terms.append(ops.add(ops.neg(ops.mean(cos)), 1.0))
    return ops.mean(ops.stack(terms))


def consistency_steps(length: int, K: int) -> np.ndarray:
    """Steps 1..K: the first contexts built from real frames (capped by the episode length)."""
    return np.arange(1, min(K, length - 1) + 1) if length > 1 else np.zeros(1, np.int64)


@dataclass
class AuxLosses:
    reward: Tensor
    height: Tensor
    cons: Tensor

    @property
    def total(self) -> Tensor:
        return ops.add(ops.add(self.reward, self.height), self.cons)

    def as_floats(self) -> dict:
        return {"L_reward": self.reward.item(), "L_height": self.height.item(),
                "L_cons": self.cons.item()}


def aux_losses(store: ParamStore, cfg: EncoderConfig, episodes: Sequence,
               weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> AuxLosses:
    """Exact auxiliary losses over whole episodes (every step encoded).

    Suitable for small batches; training uses a sampled estimate built from the
    same pieces.
    """
    zs, r_targets, heights, early, means = [], [], [], [], []
    for ep in episodes:
        z = episode_contexts(store, cfg, ep.masks, ep.actions)
        zs.append(z)
        r_targets.append(state_rewards(ep.rewards)[: ep.length])
        heights.append(np.full(ep.length, ep.camera_height))
        early.append(ops.getitem(z, consistency_steps(ep.length, cfg.K)))
        means.append(ops.mean(z, axis=0))
    z_all = ops.concat(zs, axis=0)
    l_r, l_h = identification_losses(store, cfg, z_all, np.concatenate(r_targets), np.concatenate(heights))
    l_c = consistency_loss(early, means)
    wr, wh, wc = weights
    return AuxLosses(ops.mul(l_r, wr), ops.mul(l_h, wh), ops.mul(l_c, wc))


# ------------------------------------------------------------------ diagnostics

@dataclass
class ProbeReport:
    mae: float
    baseline_mae: float
    separation: Optional[float]  # None when fewer than two heights are present
    mean_z: dict

    @property
    def beats_baseline(self) -> bool:
        return self.mae < self.baseline_mae


def context_probe(store: ParamStore, cfg: EncoderConfig, episodes: Sequence) -> ProbeReport:
    """Height-probe MAE on steps t > K, against predicting the mean held-out height.

    ``separation`` is the smallest distance between per-height mean contexts divided
    by the mean within-height spread.
    """
    preds, labels, per_height = [], [], {}
    with no_grad():
        for ep in episodes:
            steps = np.arange(cfg.K + 1, ep.length)
            if len(steps) == 0:
                continue
            z = episode_contexts(store, cfg, ep.masks, ep.actions, steps)
            _, h_hat = aux_predict(store, z)
            preds.append(h_hat.data * cfg.height_scale)
            labels.append(np.full(len(steps), ep.camera_height))
            per_height.setdefault(ep.camera_height, []).append(z.data)
    if not preds:
        raise ValueError("context_probe needs episodes longer than K + 1 steps")
    pred, lab = np.concatenate(preds), np.concatenate(labels)
    mae = float(np.mean(np.abs(pred - lab)))
    baseline = float(np.mean(np.abs(lab - lab.mean())))
    means = {h: np.concatenate(v).mean(axis=0) for h, v in sorted(per_height.items())}
    separation = None
    if len(means) >= 2:
        keys = list(means)
        between = min(np.linalg.norm(means[a] - means[b]) for i, a in enumerate(keys) for b in keys[i + 1:])
        within = np.mean([np.linalg.norm(np.concatenate(per_height[h]) - means[h], axis=1).mean()
                          for h in keys])
        separation = float(between / max(within, 1e-12))
    return ProbeReport(mae, baseline, separation, {h: m.tolist() for h, m in means.items()})


def export_contexts_csv(path, z: np.ndarray, steps: Optional[np.ndarray] = None) -> None:
    z = np.asarray(z)
    steps = np.arange(len(z)) if steps is None else steps
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"z{i}" for i in range(z.shape[1])])
        for t, row in zip(steps, z):
            w.writerow([int(t)] + [repr(float(v)) for v in row])
