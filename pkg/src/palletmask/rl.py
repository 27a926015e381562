"""Masked PPO over the flat (slot x orientation x x x y) action space."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from palletmask.checkpoint import load_checkpoint, save_checkpoint
from palletmask.core import PalletConfig, action_space_size, decode_action
from palletmask.env import (
    EnvState,
    NoiseConfig,
    ScenarioConfig,
    TerminationReason,
    is_terminal,
    reset,
    space_utilization,
    step,
)
from palletmask.masking import MaskProducer, assemble_full_masks, with_fallback

log = logging.getLogger(__name__)

DTYPE = torch.float64
MASK_MODES = ("none", "heuristic", "learned", "oracle")


class EmptyMaskError(ValueError):
    pass


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    rollout_length: int = 64
    num_envs: int = 8
    epochs: int = 4
    minibatch_size: int = 128
    learning_rate: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    total_steps: int = 200_000
    rng_seed: int = 0
    mask_mode: str = "heuristic"
    normalize_advantages: bool = True
    hidden: int = 256
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not self.clip > 0:
            raise ValueError("clip must be > 0")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")


class PolicyNet(nn.Module):
    """Heightmap CNN + buffer MLP, concatenated into a trunk with flat policy and value heads."""

    def __init__(self, pallet: PalletConfig, capacity: int, hidden: int = 256):
        super().__init__()
        self.pallet = pallet
        self.capacity = capacity
        self.hidden = hidden
        L, W = pallet.shape
        self.conv1 = nn.Conv2d(1, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.conv3 = nn.Conv2d(32, 32, 3, padding=1, stride=2)
        flat = 32 * ((L + 1) // 2) * ((W + 1) // 2)
        self.map_fc = nn.Linear(flat, hidden)
        self.box1 = nn.Linear(capacity * 4, 64)
        self.box2 = nn.Linear(64, 64)
        self.trunk = nn.Linear(hidden + 64, hidden)
        self.pi1 = nn.Linear(hidden, hidden)
        self.pi2 = nn.Linear(hidden, action_space_size(capacity, pallet))
        self.v1 = nn.Linear(hidden, hidden)
        self.v2 = nn.Linear(hidden, 1)
        nn.init.normal_(self.pi2.weight, std=0.01)
        nn.init.zeros_(self.pi2.bias)

    def forward(self, heights: torch.Tensor, boxes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = heights[:, None] / self.pallet.max_height_cells
        h = F.relu(self.conv1(h))
        h = F.relu(self.conv2(h))
        h = F.relu(self.conv3(h))
        h = F.relu(self.map_fc(h.flatten(1)))
        b = F.relu(self.box1(boxes.flatten(1)))
        b = F.relu(self.box2(b))
        z = F.relu(self.trunk(torch.cat([h, b], dim=1)))
        logits = self.pi2(F.relu(self.pi1(z)))
        value = self.v2(F.relu(self.v1(z)))[:, 0]
        return logits, value


def new_policy(pallet: PalletConfig, capacity: int, seed: int = 0, hidden: int = 256) -> PolicyNet:
    torch.manual_seed(seed)
    return PolicyNet(pallet, capacity, hidden).to(DTYPE)


def save_policy(policy: PolicyNet, path, extra: Optional[dict] = None) -> None:
    meta = {
        "arch": {"name": "policy_cnn_mlp", "hidden": policy.hidden, "capacity": policy.capacity},
        "pallet": [policy.pallet.length_cells, policy.pallet.width_cells, policy.pallet.max_height_cells],
    }
    if extra:
        meta["extra"] = extra
    save_checkpoint(path, "policy", meta, {k: v.detach().numpy() for k, v in policy.state_dict().items()})


def load_policy(path) -> PolicyNet:
    meta, tensors = load_checkpoint(path, kind="policy")
    L, W, H = meta["pallet"]
    arch = meta["arch"]
    policy = PolicyNet(PalletConfig(L, W, H), arch["capacity"], arch["hidden"]).to(DTYPE)
    policy.load_state_dict({k: torch.as_tensor(v, dtype=DTYPE) for k, v in tensors.items()})
    return policy


# ---------------------------------------------------------------------------
# masked distribution


def masked_log_probs(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Log-softmax restricted to mask; masked entries are exactly -inf."""
    return torch.log_softmax(logits.masked_fill(~mask, -math.inf), dim=-1)


def masked_entropy(logp: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    # zero the -inf entries first so the backward pass never forms 0 * inf
    safe = torch.where(mask, logp, torch.zeros_like(logp))
    return -(safe.exp() * safe * mask).sum(-1)


def masked_sample(logits, mask, rng: np.random.Generator, greedy: bool = False) -> tuple[int, float]:
    """Sample from softmax(logits) renormalised over the true entries of ``mask``."""
    logits = np.asarray(logits, dtype=float).ravel()
    mask = np.asarray(mask, dtype=bool).ravel()
    if not mask.any():
        raise EmptyMaskError("cannot sample from an all-false action mask")
    idx, logp = _sample_rows(logits[None], mask[None], rng, greedy)
    return int(idx[0]), float(logp[0])


def _sample_rows(logits: np.ndarray, mask: np.ndarray, rng: np.random.Generator, greedy: bool):
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    w = np.where(mask, np.exp(z - zmax), 0.0)
    total = w.sum(axis=1)
    logp_all = np.where(mask, (z - zmax) - np.log(total)[:, None], -np.inf)
    if greedy:
        idx = np.argmax(z, axis=1)
    else:
        cdf = np.cumsum(w, axis=1)
        u = rng.random(len(z)) * cdf[:, -1]
        idx = np.array([np.searchsorted(c, v, side="right") for c, v in zip(cdf, u)])
        idx = np.minimum(idx, z.shape[1] - 1)
        # guard against landing on a zero-weight tail entry through rounding
        bad = ~mask[np.arange(len(z)), idx]
        for r in np.nonzero(bad)[0]:
            idx[r] = np.nonzero(mask[r])[0][-1]
    return idx, logp_all[np.arange(len(z)), idx]


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class EpisodeStats:
    utilization: float
    length: int
    reason: str
    unstable: bool


class VecEnv:
    """Independent environment instances stepped in lockstep; finished episodes restart."""

    def __init__(self, scenario: ScenarioConfig, noise: NoiseConfig, num_envs: int, seed: int):
        self.scenario = scenario
        self.noise = noise
        self.rng = np.random.default_rng(seed)
        self.states = [self._fresh() for _ in range(num_envs)]
        self.lengths = [0] * num_envs
        self.steps = 0
        self.masks: Optional[np.ndarray] = None  # flat masks for the current states, filled by rollouts

    def _fresh(self) -> EnvState:
        return reset(self.scenario, int(self.rng.integers(2**31 - 1)))

    def observe(self):
        heights = np.stack([s.heights for s in self.states]).astype(float)
        boxes = np.stack([s.buffer_features() for s in self.states])
        return heights, boxes


@dataclass
class RolloutBatch:
    heights: np.ndarray  # (T, E, L, W)
    boxes: np.ndarray  # (T, E, N, 4)
    masks: np.ndarray  # (T, E, A) bool
    actions: np.ndarray  # (T, E)
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray  # (E,)
    episodes: list[EpisodeStats] = field(default_factory=list)
    fallbacks: int = 0

    @property
    def num_steps(self) -> int:
        return self.actions.size


def policy_logits(policy: PolicyNet, heights: np.ndarray, boxes: np.ndarray):
    with torch.no_grad():
        logits, values = policy(torch.as_tensor(heights, dtype=DTYPE), torch.as_tensor(boxes, dtype=DTYPE))
    return logits.numpy(), values.numpy()


def full_masks(states: Sequence[EnvState], producer: MaskProducer) -> tuple[np.ndarray, int, np.ndarray]:
    """Stacked flat masks with the empty-mask fallback applied.

    Returns ``(masks, fallbacks, dead)``; ``dead[i]`` marks states whose mask from an exact
    producer is empty, which callers treat as a ``no_valid_action`` termination.
    """
    masks = assemble_full_masks(states, producer)
    fallbacks = 0
    out = []
    dead = np.zeros(len(states), dtype=bool)
    for i, (s, m) in enumerate(zip(states, masks)):
        if producer.exact and not m.any():
            dead[i] = True
        else:
            m, fell = with_fallback(m, s)
            fallbacks += fell
        out.append(m.ravel())
    if not out:
        return np.zeros((0, 0), dtype=bool), 0, dead
    return np.stack(out), fallbacks, dead


def collect_rollouts(
    venv: VecEnv,
    policy: PolicyNet,
    config: TrainerConfig,
    producer: MaskProducer,
    rng: np.random.Generator,
    state_sink: Optional[Callable[[EnvState], None]] = None,
) -> RolloutBatch:
    T, E = config.rollout_length, len(venv.states)
    pallet = venv.scenario.pallet
    n = venv.scenario.buffer_capacity
    A = action_space_size(n, pallet)
    heights = np.zeros((T, E) + pallet.shape)
    boxes = np.zeros((T, E, n, 4))
    masks = np.zeros((T, E, A), dtype=bool)
    actions = np.zeros((T, E), dtype=np.int64)
    logps = np.zeros((T, E))
    rewards = np.zeros((T, E))
    values = np.zeros((T, E))
    dones = np.zeros((T, E), dtype=bool)
    episodes = []
    fallbacks = 0
    if venv.masks is None:
        venv.masks, fallbacks, _ = full_masks(venv.states, producer)

    def finish(e: int, state: EnvState, reason: TerminationReason) -> None:
        episodes.append(
            EpisodeStats(space_utilization(state), venv.lengths[e], reason.value, reason is TerminationReason.UNSTABLE)
        )
        venv.states[e] = venv._fresh()
        venv.lengths[e] = 0

    for t in range(T):
        if state_sink is not None:
            for s in venv.states:
                state_sink(s)
        heights[t], boxes[t] = venv.observe()
        m = venv.masks
        masks[t] = m
        logits, v = policy_logits(policy, heights[t], boxes[t])
        a, lp = _sample_rows(logits, m, rng, greedy=False)
        actions[t], logps[t], values[t] = a, lp, v
        survivors = []
        for e in range(E):
            res = step(venv.states[e], decode_action(int(a[e]), n, pallet), venv.noise)
            rewards[t, e] = res.reward
            venv.lengths[e] += 1
            if res.done:
                dones[t, e] = True
                finish(e, res.next_state, res.termination_reason)
            else:
                venv.states[e] = res.next_state
                survivors.append(e)
        # one-step lookahead: masks for the next observation, ending episodes with no admissible action
        nxt = np.zeros((E, A), dtype=bool)
        if survivors:
            ms, fb, dead = full_masks([venv.states[e] for e in survivors], producer)
            fallbacks += fb
            for j, e in enumerate(survivors):
                if dead[j]:
                    dones[t, e] = True
                    finish(e, venv.states[e], TerminationReason.NO_VALID_ACTION)
                else:
                    nxt[e] = ms[j]
        fresh = [e for e in range(E) if dones[t, e]]
        if fresh:
            ms, fb, _ = full_masks([venv.states[e] for e in fresh], producer)
            fallbacks += fb
            nxt[fresh] = ms
        venv.masks = nxt
        venv.steps += E
    h, b = venv.observe()
    _, last_values = policy_logits(policy, h, b)
    return RolloutBatch(heights, boxes, masks, actions, logps, rewards, values, dones, last_values, episodes, fallbacks)


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalised advantage estimates and returns over (T, E) arrays."""
    T = len(rewards)
    adv = np.zeros_like(rewards, dtype=float)
    running = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        next_v = last_values if t == T - 1 else values[t + 1]
        live = 1.0 - dones[t].astype(float)
        delta = rewards[t] + gamma * next_v * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + values


def ppo_loss(policy: PolicyNet, mb: dict, config: TrainerConfig):
    """Combined clipped-surrogate, value and entropy loss on a minibatch of tensors."""
    logits, value = policy(mb["heights"], mb["boxes"])
    logp_all = masked_log_probs(logits, mb["masks"])
    logp = logp_all.gather(1, mb["actions"][:, None])[:, 0]
    ratio = torch.exp(logp - mb["old_logp"])
    adv = mb["advantages"]
    surr = torch.min(ratio * adv, torch.clamp(ratio, 1 - config.clip, 1 + config.clip) * adv)
    policy_loss = -surr.mean()
    value_loss = 0.5 * ((value - mb["returns"]) ** 2).mean()
    entropy = masked_entropy(logp_all, mb["masks"]).mean()
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    stats = {
        "policy_loss": policy_loss.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "ratio_mean": ratio.mean().item(),
        "clip_fraction": ((ratio - 1).abs() > config.clip).double().mean().item(),
        "approx_kl": (mb["old_logp"] - logp).mean().item(),
    }
    return loss, policy_loss, stats


def batch_tensors(batch: RolloutBatch, config: TrainerConfig) -> dict:
    adv, ret = compute_gae(batch.rewards, batch.values, batch.dones, batch.last_values, config.gamma, config.gae_lambda)
    flat = adv.reshape(-1)
    if config.normalize_advantages and flat.size > 1:
        flat = (flat - flat.mean()) / (flat.std() + 1e-8)
    T, E = batch.actions.shape
    return {
        "heights": torch.as_tensor(batch.heights.reshape((T * E,) + batch.heights.shape[2:]), dtype=DTYPE),
        "boxes": torch.as_tensor(batch.boxes.reshape((T * E,) + batch.boxes.shape[2:]), dtype=DTYPE),
        "masks": torch.as_tensor(batch.masks.reshape(T * E, -1)),
        "actions": torch.as_tensor(batch.actions.reshape(-1)),
        "old_logp": torch.as_tensor(batch.log_probs.reshape(-1), dtype=DTYPE),
        "advantages": torch.as_tensor(flat, dtype=DTYPE),
        "returns": torch.as_tensor(ret.reshape(-1), dtype=DTYPE),
    }


def ppo_update(
    policy: PolicyNet,
    batch: RolloutBatch,
    config: TrainerConfig,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
) -> dict:
    data = batch_tensors(batch, config)
    size = len(data["actions"])
    totals: dict[str, float] = {}
    count = 0
    for _ in range(config.epochs):
        order = rng.permutation(size)
        for i in range(0, size, config.minibatch_size):
            idx = torch.as_tensor(order[i : i + config.minibatch_size])
            mb = {k: v[idx] for k, v in data.items()}
            loss, _, stats = ppo_loss(policy, mb, config)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite PPO loss: {stats}")
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(policy.parameters(), config.max_grad_norm)
            optimizer.step()
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    return {k: v / max(count, 1) for k, v in totals.items()}


CURVE_FIELDS = (
    "step", "mean_utilization", "episodes", "unstable_fraction", "policy_loss", "value_loss",
    "entropy", "approx_kl", "clip_fraction", "ratio_mean", "fallbacks",
)


def train_policy(
    scenario: ScenarioConfig,
    noise: NoiseConfig,
    config: TrainerConfig,
    producer: MaskProducer,
    state_sink: Optional[Callable[[EnvState], None]] = None,
    checkpoint_dir: Optional[Path] = None,
) -> tuple[PolicyNet, list[dict]]:
    """Alternate rollouts and PPO updates until ``total_steps`` environment steps."""
    policy = new_policy(scenario.pallet, scenario.buffer_capacity, config.rng_seed, config.hidden)
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng([config.rng_seed, 1])
    venv = VecEnv(scenario, noise, config.num_envs, int(rng.integers(2**31 - 1)))
    curve = []
    updates = 0
    while venv.steps < config.total_steps:
        batch = collect_rollouts(venv, policy, config, producer, rng, state_sink)
        stats = ppo_update(policy, batch, config, optimizer, rng)
        utils = [e.utilization for e in batch.episodes]
        row = {
            "step": venv.steps,
            "mean_utilization": float(np.mean(utils)) if utils else float("nan"),
            "episodes": len(utils),
            "unstable_fraction": float(np.mean([e.unstable for e in batch.episodes])) if utils else float("nan"),
            "fallbacks": batch.fallbacks,
        }
        row.update({k: stats.get(k, float("nan")) for k in CURVE_FIELDS if k not in row})
        curve.append(row)
        updates += 1
        log.info("step %d util %.4f kl %.4f", venv.steps, row["mean_utilization"], row["approx_kl"])
        if checkpoint_dir is not None and config.checkpoint_every and updates % config.checkpoint_every == 0:
            save_policy(policy, Path(checkpoint_dir) / f"policy_step{venv.steps}.ckpt")
    return policy, curve


@dataclass
class EvalResult:
    mean_utilization: float
    std_utilization: float
    utilizations: list[float]
    lengths: list[int]
    termination_reasons: list[str]

    def as_dict(self) -> dict:
        return asdict(self)


def episode_seeds(seed: int, episodes: int) -> list[int]:
    return [int(s.generate_state(1)[0] >> 1) for s in np.random.SeedSequence(seed).spawn(episodes)]


def evaluate_policy(
    policy: PolicyNet,
    scenario: ScenarioConfig,
    noise: NoiseConfig,
    producer: MaskProducer,
    episodes: int = 20,
    seed: int = 0,
    greedy: bool = False,
    trace: Optional[list] = None,
) -> EvalResult:
    """Run ``episodes`` fresh episodes (seeded box orders) in lockstep and report final utilization."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    pallet = scenario.pallet
    n = scenario.buffer_capacity
    rng = np.random.default_rng([seed, 2])
    states = [reset(scenario, s) for s in episode_seeds(seed, episodes)]
    lengths = [0] * episodes
    reasons: list[Optional[str]] = [None] * episodes
    finals: list[Optional[EnvState]] = [None] * episodes
    if trace is not None:
        trace.extend([] for _ in range(episodes))
    for i, s in enumerate(states):
        r = is_terminal(s)
        if r is not None:
            reasons[i], finals[i] = r.value, s
    while True:
        live = [i for i in range(episodes) if reasons[i] is None]
        if not live:
            break
        m, _, dead = full_masks([states[i] for i in live], producer)
        for j in np.nonzero(dead)[0]:
            i = live[j]
            reasons[i], finals[i] = TerminationReason.NO_VALID_ACTION.value, states[i]
        if dead.any():
            m = m[~dead]
            live = [i for j, i in enumerate(live) if not dead[j]]
            if not live:
                break
        cur = [states[i] for i in live]
        h = np.stack([s.heights for s in cur]).astype(float)
        b = np.stack([s.buffer_features() for s in cur])
        logits, _ = policy_logits(policy, h, b)
        acts, _ = _sample_rows(logits, m, rng, greedy)
        for j, i in enumerate(live):
            act = decode_action(int(acts[j]), n, pallet)
            res = step(states[i], act, noise)
            lengths[i] += 1
            if trace is not None:
                trace[i].append({"action": [act.slot, act.orientation, act.x, act.y], "reward": res.reward,
                                 "heightmap": res.next_state.heights.ravel().tolist()})
            states[i] = res.next_state
            if res.done:
                reasons[i] = res.termination_reason.value
                finals[i] = res.next_state
    utils = [space_utilization(s) for s in finals]
    return EvalResult(float(np.mean(utils)), float(np.std(utils)), utils, lengths, reasons)
