"""Context-conditioned recurrent actor-critic trained offline with CQL-SAC.

Per step the policy trunk embeds the current mask with its own CNN, appends the
context ``z_t`` and runs an LSTM; its output ``x_t`` feeds a tanh-Gaussian actor
head and two Q heads (which also take the action). Only the Q heads have slow
target copies; targets reuse the online trunk with gradients stopped.

Gradient routing: critic losses train the Q heads, the trunk and the context
encoder; the actor loss sees ``x_t`` through a stop-gradient and evaluates
frozen copies of the Q heads, so it only moves the actor head; the auxiliary
losses train the encoder and its head.

Ablations: ``no_context`` feeds zeros instead of ``z`` and drops the encoder and
its losses, ``no_context_id`` drops the reward/height losses, ``no_consistency``
drops the consistency loss and ``no_lstm`` replaces the trunk recurrence by the
identity.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import context as cx
from .numgrad import Adam, CheckpointError, ParamStore, Tape, Tensor, backward, no_grad, ops
from .numgrad import nn
from .numgrad.checkpoint import load_store, read_checkpoint, save_store
from .numgrad.tensor import ShapeError
from .tracksim import ActionCommand

ACTION_DIM = 2
LOG_STD_MIN, LOG_STD_MAX = -10.0, 2.0
UNIFORM_LOG_DENSITY = -ACTION_DIM * math.log(2.0)  # uniform on [-1, 1]^2
CRITICS = ("critic1", "critic2")
ABLATIONS = ("no_context_id", "no_consistency", "no_context", "no_lstm")
CHECKPOINT_KIND = "evtlab-policy"


class TrainingDivergence(FloatingPointError):
    def __init__(self, step: int, batch_id: str, component: str):
        super().__init__(f"non-finite {component} at step {step} (batch {batch_id})")
        self.step, self.batch_id, self.component = step, batch_id, component


class IncompatibleCheckpoint(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    mask_h: int = 32
    mask_w: int = 32
    K: int = 8
    d_z: int = 16
    feat_dim: int = 32
    encoder_hidden: int = 32
    aux_hidden: int = 32
    lstm_hidden: int = 64
    head_hidden: int = 64
    no_context: bool = False
    no_lstm: bool = False

    @property
    def encoder(self) -> cx.EncoderConfig:
        return cx.EncoderConfig(K=self.K, d_z=self.d_z, mask_h=self.mask_h, mask_w=self.mask_w,
                                feat_dim=self.feat_dim, lstm_hidden=self.encoder_hidden,
                                aux_hidden=self.aux_hidden)

    @property
    def x_dim(self) -> int:
        return self.feat_dim + self.d_z if self.no_lstm else self.lstm_hidden


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    alpha: float = 0.2
    auto_alpha: bool = False
    target_entropy: float = -float(ACTION_DIM)
    cql_samples: int = 10
    cql_weight: float = 1.0
    cql_importance: bool = True
    cql_subtract: str = "data"  # data | policy
    seq_len: int = 24
    burn_in: int = 8
    batch_size: int = 8
    lr_critic: float = 3e-4
    lr_actor: float = 3e-4
    lr_encoder: float = 3e-4
    grad_clip: float = 10.0
    tau_target: float = 0.005
    steps: int = 3000
    checkpoint_every: int = 500
    w_reward: float = 1.0
    w_height: float = 1.0
    w_cons: float = 1.0
    no_context_id: bool = False
    no_consistency: bool = False
    no_context: bool = False
    no_lstm: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.seq_len > self.burn_in >= 0:
            raise ValueError(f"need seq_len > burn_in >= 0, got {self.seq_len}, {self.burn_in}")
        if self.cql_subtract not in ("data", "policy"):
            raise ValueError(f"cql_subtract must be 'data' or 'policy', got {self.cql_subtract!r}")
        if self.batch_size < 1 or self.cql_samples < 1:
            raise ValueError("batch_size and cql_samples must be positive")

    @property
    def ablation(self) -> Optional[str]:
        on = [a for a in ABLATIONS if getattr(self, a)]
        return on[0] if len(on) == 1 else ("+".join(on) if on else None)

    def with_ablation(self, name: Optional[str]) -> "TrainConfig":
        flags = {a: False for a in ABLATIONS}
        if name is not None:
            if name not in ABLATIONS:
                raise ValueError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
            flags[name] = True
        return dataclasses.replace(self, **flags)

    @property
    def uses_context(self) -> bool:
        return not self.no_context


def model_for(train_cfg: TrainConfig, base: ModelConfig = ModelConfig()) -> ModelConfig:
    return dataclasses.replace(base, no_context=train_cfg.no_context, no_lstm=train_cfg.no_lstm)


# ------------------------------------------------------------------ parameters

def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    if not cfg.no_context:
        cx.init_encoder(store, cfg.encoder, rng)
    cx.add_cnn(store, "policy/cnn", cfg.mask_h, cfg.mask_w, cfg.feat_dim, rng)
    if not cfg.no_lstm:
        nn.add_lstm(store, "policy/lstm", cfg.feat_dim + cfg.d_z, cfg.lstm_hidden, rng)
    nn.add_mlp(store, "actor", [cfg.x_dim, cfg.head_hidden, 2 * ACTION_DIM], rng, last_scale=0.1)
    for name in CRITICS:
        nn.add_mlp(store, name, [cfg.x_dim + ACTION_DIM, cfg.head_hidden, cfg.head_hidden, 1], rng)
    for name in CRITICS:
        for pname in store.names(f"{name}/"):
            store.add(f"target/{pname}", store[pname].data.copy())
    store.add("alpha/log_alpha", np.zeros(1))
    return store


def param_groups(store: ParamStore) -> dict[str, list[Tensor]]:
    return {
        "critic": store.group("critic1/", "critic2/", "policy/"),
        "actor": store.group("actor/"),
        "encoder": store.group("encoder/", "aux/"),
    }


def frozen(store: ParamStore, prefix: str) -> dict[str, Tensor]:
    """Constant copies of a parameter group (no gradient reaches the originals)."""
    return {n: Tensor(store[n].data) for n in store.names(prefix)}


def soft_update(store: ParamStore, tau: float) -> None:
    for name in CRITICS:
        for pname in store.names(f"{name}/"):
            tgt = store[f"target/{pname}"].data
            tgt *= 1.0 - tau
            tgt += tau * store[pname].data


# ------------------------------------------------------------------ heads

def actor_head(params, x: Tensor) -> tuple[Tensor, Tensor]:
    out = nn.mlp(params, "actor", x, 2)
    return out[:, :ACTION_DIM], ops.clip(out[:, ACTION_DIM:], LOG_STD_MIN, LOG_STD_MAX)


def q_value(params, prefix: str, x: Tensor, a) -> Tensor:
    """Q head on (x, a) -> (N,)."""
    out = nn.mlp(params, prefix, ops.concat([x, a], axis=1), 3)
    return out[:, 0]


def _log1m_tanh2(u):
    """log(1 - tanh(u)^2) in a numerically stable form (numpy arrays)."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squash_sample(mean: Tensor, log_std: Tensor, eps: np.ndarray) -> tuple[Tensor, Tensor]:
    """Reparameterized tanh-Gaussian sample and its log-density (including the squash correction)."""
    std = ops.exp(log_std)
    u = ops.add(mean, ops.mul(std, Tensor(eps)))
    a = ops.tanh(u)
    gauss = ops.sub(ops.add(ops.mul(Tensor(eps * eps), -0.5), ops.neg(log_std)), 0.5 * math.log(2 * math.pi))
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    corr = ops.mul(ops.add(ops.neg(ops.add(u, ops.softplus(ops.mul(u, -2.0)))), math.log(2.0)), 2.0)
    logp = ops.sum(ops.sub(gauss, corr), axis=1)
    return a, logp


def squash_sample_np(mean: np.ndarray, log_std: np.ndarray, eps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u = mean + np.exp(log_std) * eps
    logp = np.sum(-0.5 * eps * eps - log_std - 0.5 * math.log(2 * math.pi) - _log1m_tanh2(u), axis=-1)
    return np.tanh(u), logp


def squash_log_prob(a: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Density of a squashed action in (-1, 1)^d."""
    u = np.arctanh(np.clip(a, -1 + 1e-12, 1 - 1e-12))
    z = (u - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi) - _log1m_tanh2(u), axis=-1)


# ------------------------------------------------------------------ trunk

def policy_cnn(store: ParamStore, masks: np.ndarray) -> Tensor:
    return cx.cnn_features(store, "policy/cnn", masks)


def trunk_step(store: ParamStore, cfg: ModelConfig, feat: Tensor, z: Optional[Tensor],
               state: tuple[Tensor, Tensor]) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    n = feat.shape[0]
    zt = z if z is not None else nn.zeros(n, cfg.d_z)
    u = ops.concat([feat, zt], axis=1)
    if cfg.no_lstm:
        return u, state
    h, c = nn.lstm_cell(u, state[0], state[1], store["policy/lstm/w_x"], store["policy/lstm/w_h"],
                        store["policy/lstm/b"])
    return h, (h, c)


def zero_state(cfg: ModelConfig, n: int) -> tuple[Tensor, Tensor]:
    return nn.zeros(n, cfg.lstm_hidden), nn.zeros(n, cfg.lstm_hidden)


@dataclass
class PolicyOutput:
    mean: Tensor
    log_std: Tensor
    x: Tensor
    state: tuple[Tensor, Tensor]


def policy_forward(store: ParamStore, cfg: ModelConfig, masks: np.ndarray, z: Optional[Tensor],
                   state: tuple[Tensor, Tensor]) -> PolicyOutput:
    """One step for a batch of masks (N, H, W) with contexts (N, d_z) (ignored under no_context)."""
    masks = np.asarray(masks)
    if masks.shape[1:] != (cfg.mask_h, cfg.mask_w):
        raise ShapeError(f"policy expects {cfg.mask_h}x{cfg.mask_w} masks, got {masks.shape[1:]}")
    x, new_state = trunk_step(store, cfg, policy_cnn(store, masks), None if cfg.no_context else z, state)
    mean, log_std = actor_head(store, x)
    return PolicyOutput(mean, log_std, x, new_state)


# ------------------------------------------------------------------ batches

@dataclass
class SequenceBatch:
    """N in-episode subsequences of L steps plus the observation after the last step."""

    obs: np.ndarray  # (N, L+1, H, W) uint8
    actions: np.ndarray  # (N, L, 2)
    rewards: np.ndarray  # (N, L)
    terminal: np.ndarray  # (N, L) 1.0 where the episode ended in failure
    state_rewards: np.ndarray  # (N, L+1) reward of the state each step observes
    heights: np.ndarray  # (N,)
    ctx_frames: np.ndarray  # (F, H, W)
    ctx_actions: np.ndarray  # (F, 2)
    ctx_index: np.ndarray  # (N*(L+1) + sum(early), K) window rows first, then early rows
    early_counts: list = field(default_factory=list)
    batch_id: str = ""

    @property
    def n(self) -> int:
        return self.obs.shape[0]

    @property
    def length(self) -> int:
        return self.actions.shape[1]


def episode_obs(ep) -> np.ndarray:
    return np.concatenate([ep.masks, ep.final_mask[None]], axis=0)


def build_batch(episodes: Sequence, picks: Sequence[tuple[int, int]], seq_len: int, K: int,
                batch_id: str = "") -> SequenceBatch:
    """Assemble subsequences ``(episode index, start)``; each covers steps start .. start+seq_len-1."""
    obs, acts, rews, term, srew, heights = [], [], [], [], [], []
    frames, factions, win_idx, early_idx, early_counts = [], [], [], [], []
    offset = 0
    for e, s in picks:
        ep = episodes[e]
        if s < 0 or s + seq_len > ep.length:
            raise ValueError(f"subsequence {s}..{s + seq_len} outside episode {e} of length {ep.length}")
        sl = slice(s, s + seq_len)
        obs.append(episode_obs(ep)[s: s + seq_len + 1])
        acts.append(ep.actions[sl])
        rews.append(ep.rewards[sl])
        term.append((ep.dones[sl] & ep.failed).astype(np.float64))
        srew.append(cx.state_rewards(ep.rewards)[s: s + seq_len + 1])
        heights.append(ep.camera_height)
        # frames s-K .. s+seq_len-1 serve the window, frames 0..K-1 the early steps
        lo = max(0, s - K)
        hi = s + seq_len
        frames.append(ep.masks[lo:hi])
        factions.append(ep.actions[lo:hi])
        win_idx.append(cx.history_index(np.arange(s, s + seq_len + 1), K, offset - lo))
        offset += hi - lo
        early = cx.consistency_steps(ep.length, K)
        e_hi = int(early.max())
        frames.append(ep.masks[:e_hi])
        factions.append(ep.actions[:e_hi])
        early_idx.append(cx.history_index(early, K, offset))
        early_counts.append(len(early))
        offset += e_hi
    return SequenceBatch(
        obs=np.stack(obs), actions=np.stack(acts), rewards=np.stack(rews), terminal=np.stack(term),
        state_rewards=np.stack(srew), heights=np.array(heights, dtype=np.float64),
        ctx_frames=np.concatenate(frames), ctx_actions=np.concatenate(factions),
        ctx_index=np.concatenate(win_idx + early_idx), early_counts=early_counts, batch_id=batch_id,
    )


class SequenceSampler:
    """Uniform over valid subsequence starts across all episodes long enough to hold one."""

    def __init__(self, episodes: Sequence, seq_len: int, K: int, rng: np.random.Generator):
        self.episodes = episodes
        self.seq_len, self.K, self.rng = seq_len, K, rng
        self.eligible = np.array([i for i, ep in enumerate(episodes) if ep.length >= seq_len], dtype=np.int64)
        if len(self.eligible) == 0:
            raise ValueError(f"no episode is at least {seq_len} steps long")
        starts = np.array([episodes[i].length - seq_len + 1 for i in self.eligible], dtype=np.float64)
        self.weights = starts / starts.sum()
        self.count = 0

    def sample(self, n: int) -> SequenceBatch:
        eps = self.rng.choice(self.eligible, size=n, p=self.weights)
        picks = [(int(e), int(self.rng.integers(0, self.episodes[e].length - self.seq_len + 1))) for e in eps]
        self.count += 1
        bid = f"{self.count}:" + ",".join(f"{e}@{s}" for e, s in picks)
        return build_batch(self.episodes, picks, self.seq_len, self.K, bid)


# ------------------------------------------------------------------ losses

@dataclass
class Noise:
    """Pre-drawn randomness for one loss evaluation, so the loss is a pure function of parameters."""

    uniform: np.ndarray  # (P, M, 2) uniform proposals in [-1, 1]
    policy_eps: np.ndarray  # (P, M, 2)
    next_eps: np.ndarray  # (M, 2)
    actor_eps: np.ndarray  # (M, 2)

    @classmethod
    def draw(cls, rng: np.random.Generator, m: int, n_cql: int) -> "Noise":
        return cls(rng.uniform(-1.0, 1.0, size=(n_cql, m, ACTION_DIM)),
                   rng.standard_normal((n_cql, m, ACTION_DIM)),
                   rng.standard_normal((m, ACTION_DIM)),
                   rng.standard_normal((m, ACTION_DIM)))


def conservative_term(q_props: Tensor, q_subtract: Tensor, log_density: Optional[np.ndarray] = None) -> Tensor:
    """mean_s[logsumexp_j (Q(s, a_j) - log p(a_j))] - mean_s[Q(s, a_sub)].

    q_props: (P, M) proposal values; q_subtract: (M,) or (P, M) values averaged
    per state. Without ``log_density`` there is no importance correction.
    """
    v = q_props if log_density is None else ops.sub(q_props, Tensor(np.asarray(log_density, dtype=np.float64)))
    lse = ops.mean(ops.logsumexp(v, axis=0))
    return ops.sub(lse, ops.mean(q_subtract))


def _repeat_rows(x: Tensor, p: int) -> Tensor:
    return ops.reshape(ops.expand(x, p), (p * x.shape[0], x.shape[1]))


@dataclass
class Forward:
    x: Tensor  # (M, x_dim) states on loss steps
    x_next: Tensor  # (M, x_dim)
    z_window: Optional[Tensor]  # (N, L+1, d_z)
    z_early: list
    actions: np.ndarray  # (M, 2)
    rewards: np.ndarray  # (M,)
    terminal: np.ndarray  # (M,)


def forward_batch(store: ParamStore, cfg: ModelConfig, batch: SequenceBatch, burn_in: int) -> Forward:
    n, L = batch.n, batch.length
    steps = L + 1
    z_win, z_early = None, []
    if not cfg.no_context:
        z_all = cx.encode_frames(store, cfg.encoder, batch.ctx_frames, batch.ctx_actions, batch.ctx_index)
        z_win = ops.reshape(z_all[: n * steps], (n, steps, cfg.d_z))
        pos = n * steps
        for k in batch.early_counts:
            z_early.append(z_all[pos: pos + k])
            pos += k
    feats = policy_cnn(store, batch.obs.reshape((n * steps,) + batch.obs.shape[2:]))
    feats = ops.reshape(feats, (n, steps, cfg.feat_dim))
    state = zero_state(cfg, n)
    xs = []
    for t in range(steps):
        zt = None if z_win is None else z_win[:, t, :]
        x, state = trunk_step(store, cfg, feats[:, t, :], zt, state)
        xs.append(x)
    # loss steps are burn_in .. L-1, laid out step-major
    x = ops.concat(xs[burn_in:L], axis=0)
    x_next = ops.concat(xs[burn_in + 1: L + 1], axis=0)

    def flat(a):
        return np.concatenate([a[:, t] for t in range(burn_in, L)], axis=0)

    return Forward(x, x_next, z_win, z_early, flat(batch.actions), flat(batch.rewards), flat(batch.terminal))


@dataclass
class CriticTargets:
    """Constants of one critic update: Bellman targets and the CQL proposal set."""

    y: np.ndarray  # (M,)
    proposals: np.ndarray  # (2P, M, 2): P uniform then P current-policy actions
    log_density: np.ndarray  # (2P, M)


def critic_targets(store: ParamStore, cfg: TrainConfig, fw: Forward, noise: Noise,
                   alpha: float) -> CriticTargets:
    """y = r + gamma (1 - terminal) (min_i Q_target_i(s', a') - alpha log pi(a'|s')), a' ~ pi(s')."""
    m = fw.x.shape[0]
    p = noise.uniform.shape[0]
    with no_grad():
        xn = Tensor(fw.x_next.data)
        mean_n, log_std_n = actor_head(store, xn)
        a_next, logp_next = squash_sample_np(mean_n.data, log_std_n.data, noise.next_eps)
        tgt = {n: store[n] for n in store.names("target/")}
        q_next = np.minimum(q_value(tgt, "target/critic1", xn, Tensor(a_next)).data,
                            q_value(tgt, "target/critic2", xn, Tensor(a_next)).data)
        y = fw.rewards + cfg.gamma * (1.0 - fw.terminal) * (q_next - alpha * logp_next)
        mean_c, log_std_c = actor_head(store, Tensor(fw.x.data))
        a_pi, logp_pi = squash_sample_np(mean_c.data[None], log_std_c.data[None], noise.policy_eps)
    props = np.concatenate([noise.uniform, a_pi], axis=0)
    log_density = np.concatenate([np.full((p, m), UNIFORM_LOG_DENSITY), logp_pi], axis=0)
    return CriticTargets(y, props, log_density)


def critic_loss_from(store: ParamStore, cfg: TrainConfig, x: Tensor, actions: np.ndarray,
                     tg: CriticTargets) -> tuple[Tensor, dict]:
    """Sum over both critics of cql_weight * conservative term + 0.5 * Bellman error."""
    n_props, m = tg.log_density.shape
    p = n_props // 2
    x_rep = _repeat_rows(x, n_props)
    flat_props = Tensor(tg.proposals.reshape(-1, ACTION_DIM))
    total, parts = None, {}
    for name in CRITICS:
        q_data = q_value(store, name, x, Tensor(actions))
        bellman = ops.mul(ops.squared_error(q_data, tg.y), 0.5)
        q_props = ops.reshape(q_value(store, name, x_rep, flat_props), (n_props, m))
        q_sub = q_data if cfg.cql_subtract == "data" else q_props[p:]
        cons = conservative_term(q_props, q_sub, tg.log_density if cfg.cql_importance else None)
        loss_i = ops.add(ops.mul(cons, cfg.cql_weight), bellman)
        total = loss_i if total is None else ops.add(total, loss_i)
        parts[f"{name}_bellman"] = bellman.item()
        parts[f"{name}_cql"] = cons.item()
    return total, parts


def critic_loss(store: ParamStore, cfg: TrainConfig, fw: Forward, noise: Noise,
                alpha: float) -> tuple[Tensor, dict]:
    return critic_loss_from(store, cfg, fw.x, fw.actions, critic_targets(store, cfg, fw, noise, alpha))


def sac_actor_objective(mean: Tensor, log_std: Tensor, eps: np.ndarray, alpha: float,
                        q_min: Callable[[Tensor], Tensor]) -> tuple[Tensor, Tensor]:
    """mean(alpha * log pi(a|s) - Q_min(s, a)) over reparameterized a; returns (loss, logp)."""
    a, logp = squash_sample(mean, log_std, eps)
    return ops.mean(ops.sub(ops.mul(logp, alpha), q_min(a))), logp


def actor_loss(store: ParamStore, cfg: TrainConfig, fw: Forward, noise: Noise,
               alpha: float) -> tuple[Tensor, np.ndarray]:
    """Actor objective with x behind a stop-gradient and the Q heads frozen."""
    x = ops.stop_gradient(fw.x)
    mean, log_std = actor_head(store, x)
    c1, c2 = frozen(store, "critic1/"), frozen(store, "critic2/")

    def q_min(a):
        return ops.minimum(q_value(c1, "critic1", x, a), q_value(c2, "critic2", x, a))

    loss, logp = sac_actor_objective(mean, log_std, noise.actor_eps, alpha, q_min)
    return loss, logp.data


def rep_losses(store: ParamStore, model: ModelConfig, cfg: TrainConfig, batch: SequenceBatch,
               fw: Forward) -> Optional[cx.AuxLosses]:
    if model.no_context:
        return None
    n, L = batch.n, batch.length
    enc = model.encoder
    zero = Tensor(np.zeros(()))
    l_r = l_h = l_c = zero
    if not cfg.no_context_id:
        z_loss = ops.concat([fw.z_window[:, t, :] for t in range(cfg.burn_in, L)], axis=0)
        r_t = np.concatenate([batch.state_rewards[:, t] for t in range(cfg.burn_in, L)])
        h_t = np.concatenate([batch.heights for _ in range(cfg.burn_in, L)])
        l_r, l_h = cx.identification_losses(store, enc, z_loss, r_t, h_t)
        l_r, l_h = ops.mul(l_r, cfg.w_reward), ops.mul(l_h, cfg.w_height)
    if not cfg.no_consistency:
        # episode average estimated from every context of that episode in the batch
        means = [ops.mean(ops.concat([fw.z_window[i], fw.z_early[i]], axis=0), axis=0) for i in range(n)]
        l_c = ops.mul(cx.consistency_loss(fw.z_early, means), cfg.w_cons)
    return cx.AuxLosses(l_r, l_h, l_c)


def log_columns(cfg: TrainConfig) -> list[str]:
    cols = ["step", "L_D", "L_actor"]
    if not cfg.no_context:
        if not cfg.no_context_id:
            cols += ["L_reward", "L_height"]
        if not cfg.no_consistency:
            cols.append("L_cons")
    return cols + ["alpha"]


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    store: ParamStore
    model: ModelConfig
    config: TrainConfig
    log: list[dict]
    optimizers: dict
    checkpoints: list[Path] = field(default_factory=list)


def make_optimizers(store: ParamStore, cfg: TrainConfig) -> dict[str, Adam]:
    groups = param_groups(store)
    lrs = {"critic": cfg.lr_critic, "actor": cfg.lr_actor, "encoder": cfg.lr_encoder}
    opts = {k: Adam(v, lr=lrs[k], grad_clip=cfg.grad_clip) for k, v in groups.items() if v}
    if cfg.auto_alpha:
        opts["alpha"] = Adam([store["alpha/log_alpha"]], lr=cfg.lr_actor)
    return opts


def current_alpha(store: ParamStore, cfg: TrainConfig) -> float:
    return float(np.exp(store["alpha/log_alpha"].data[0])) * cfg.alpha if cfg.auto_alpha else cfg.alpha


def train_step(store: ParamStore, model: ModelConfig, cfg: TrainConfig, opts: dict,
               batch: SequenceBatch, noise: Noise, step: int) -> dict:
    alpha = current_alpha(store, cfg)
    with Tape():
        fw = forward_batch(store, model, batch, cfg.burn_in)
        l_d, _ = critic_loss(store, cfg, fw, noise, alpha)
        l_a, logp = actor_loss(store, cfg, fw, noise, alpha)
        rep = rep_losses(store, model, cfg, batch, fw)
        total = ops.add(l_d, l_a)
        if rep is not None:
            total = ops.add(total, rep.total)
        row = {"step": step, "L_D": l_d.item(), "L_actor": l_a.item()}
        if rep is not None:
            vals = rep.as_floats()
            for k in log_columns(cfg):
                if k in vals:
                    row[k] = vals[k]
        row["alpha"] = alpha
        for k, v in row.items():
            if k != "step" and not np.isfinite(v):
                raise TrainingDivergence(step, batch.batch_id, k)
        backward(total)
    if cfg.auto_alpha:
        # d/d(log_alpha) of -alpha * (logp + target_entropy)
        store["alpha/log_alpha"].grad[0] = -alpha * float(np.mean(logp + cfg.target_entropy))
    for name, opt in opts.items():
        opt.step()
    soft_update(store, cfg.tau_target)
    return row


def train(episodes: Sequence, cfg: TrainConfig, model: Optional[ModelConfig] = None,
          out_dir=None, progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Offline CQL-SAC with the auxiliary representation losses.

    Writes ``train_log.csv`` and periodic ``ckpt_<step>.bin`` plus ``final.bin``
    into ``out_dir`` when given.
    """
    if not episodes:
        raise ValueError("cannot train on an empty dataset")
    h, w = episodes[0].masks.shape[1:]
    model = model_for(cfg, model or ModelConfig(mask_h=h, mask_w=w))
    if (model.mask_h, model.mask_w) != (h, w):
        raise ShapeError(f"dataset masks are {h}x{w}, model expects {model.mask_h}x{model.mask_w}")
    rng = np.random.default_rng(cfg.seed)
    store = init_params(model, int(rng.integers(2 ** 31)))
    opts = make_optimizers(store, cfg)
    sampler = SequenceSampler(episodes, cfg.seq_len, model.K, np.random.default_rng(rng.integers(2 ** 31)))
    noise_rng = np.random.default_rng(rng.integers(2 ** 31))
    m = cfg.batch_size * (cfg.seq_len - cfg.burn_in)
    result = TrainResult(store, model, cfg, [], opts)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=log_columns(cfg))
        writer.writeheader()
    try:
        for step in range(1, cfg.steps + 1):
            batch = sampler.sample(cfg.batch_size)
            row = train_step(store, model, cfg, opts, batch, Noise.draw(noise_rng, m, cfg.cql_samples), step)
            result.log.append(row)
            if writer is not None:
                writer.writerow({k: (v if k == "step" else repr(float(v))) for k, v in row.items()})
            if progress is not None:
                progress(row)
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                path = out / f"ckpt_{step}.bin"
                save_policy(path, result, step)
                result.checkpoints.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        path = out / "final.bin"
        save_policy(path, result, cfg.steps)
        result.checkpoints.append(path)
    return result


def read_train_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# ------------------------------------------------------------------ checkpoints

def save_policy(path, result: TrainResult, step: int) -> None:
    meta = {"kind": CHECKPOINT_KIND, "step": step, "model": dataclasses.asdict(result.model),
            "train": dataclasses.asdict(result.config)}
    save_store(path, result.store, result.optimizers, meta)


@dataclass
class LoadedPolicy:
    store: ParamStore
    model: ModelConfig
    train: TrainConfig
    meta: dict


def load_policy(path, expect: Optional[ModelConfig] = None) -> LoadedPolicy:
    try:
        _, meta = read_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise IncompatibleCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("kind") != CHECKPOINT_KIND:
        raise IncompatibleCheckpoint(f"{path} is not a policy checkpoint")
    try:
        model = ModelConfig(**meta["model"])
        train_cfg = TrainConfig(**meta["train"])
    except (TypeError, ValueError, KeyError) as exc:
        raise IncompatibleCheckpoint(f"{path}: unreadable configuration ({exc})") from exc
    if expect is not None and expect != model:
        diff = {k: (v, getattr(model, k)) for k, v in dataclasses.asdict(expect).items() if getattr(model, k) != v}
        raise IncompatibleCheckpoint(f"{path}: model configuration differs (expected, found): {diff}")
    store = init_params(model, 0)
    try:
        load_store(path, store)
    except (KeyError, ShapeError) as exc:
        raise IncompatibleCheckpoint(f"{path}: parameters do not match the configuration ({exc})") from exc
    return LoadedPolicy(store, model, train_cfg, meta)


# ------------------------------------------------------------------ acting

class Agent:
    """Online controller for a batch of lockstep episodes.

    Keeps the K-slot rolling history as encoder CNN features plus actions, so each
    new mask goes through the CNNs once. ``g`` (the auxiliary head) is never read.
    """

    def __init__(self, store: ParamStore, model: ModelConfig, deterministic: bool = True,
                 rng: Optional[np.random.Generator] = None):
        self.store, self.model = store, model
        self.deterministic = deterministic
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.reset(1)

    @classmethod
    def from_checkpoint(cls, path, expect: Optional[ModelConfig] = None, **kw) -> "Agent":
        lp = load_policy(path, expect)
        return cls(lp.store, lp.model, **kw)

    def reset(self, n: int, embodiment=None) -> None:
        m = self.model
        if embodiment is not None and (embodiment.mask_h, embodiment.mask_w) != (m.mask_h, m.mask_w):
            raise ShapeError(f"policy expects {m.mask_h}x{m.mask_w} masks, embodiment renders "
                             f"{embodiment.mask_h}x{embodiment.mask_w}")
        self.n = n
        self.hist_feat = np.zeros((n, m.K, m.feat_dim))
        self.hist_act = np.zeros((n, m.K, ACTION_DIM))
        self.hist_pad = np.ones((n, m.K), dtype=bool)
        self.state = zero_state(m, n)

    def context(self) -> Optional[np.ndarray]:
        if self.model.no_context:
            return None
        m = self.model
        feats = Tensor(self.hist_feat.reshape(self.n * m.K, m.feat_dim))
        index = np.where(self.hist_pad, -1, np.arange(self.n * m.K).reshape(self.n, m.K))
        with no_grad():
            return cx.encode_from_features(self.store, m.encoder, feats,
                                           self.hist_act.reshape(-1, ACTION_DIM), index).data

    def act_batch(self, masks: np.ndarray) -> np.ndarray:
        masks = np.asarray(masks)
        if masks.shape[0] != self.n:
            raise ValueError(f"agent was reset for {self.n} episodes, got {masks.shape[0]} masks")
        with no_grad():
            z = self.context()
            out = policy_forward(self.store, self.model, masks, None if z is None else Tensor(z), self.state)
            if self.deterministic:
                a = np.tanh(out.mean.data)
            else:
                eps = self.rng.standard_normal(out.mean.shape)
                a, _ = squash_sample_np(out.mean.data, out.log_std.data, eps)
            self.state = out.state
            if not self.model.no_context:
                feat = cx.cnn_features(self.store, "encoder/cnn", masks).data
                self.hist_feat = np.concatenate([self.hist_feat[:, 1:], feat[:, None]], axis=1)
        self.hist_act = np.concatenate([self.hist_act[:, 1:], a[:, None]], axis=1)
        self.hist_pad = np.concatenate([self.hist_pad[:, 1:], np.zeros((self.n, 1), bool)], axis=1)
        return a

    def act(self, mask: np.ndarray) -> ActionCommand:
        a = self.act_batch(np.asarray(mask)[None])[0]
        return ActionCommand(float(a[0]), float(a[1]))
