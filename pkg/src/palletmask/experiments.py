"""Experiment drivers shared by the CLI and the acceptance suite: dataset generation and mask-mode comparisons."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from palletmask.config import RunConfig
from palletmask.core import decode_action
from palletmask.datasets import MaskSample
from palletmask.env import step
from palletmask.iterate import StatePair, StateSampler, label_states
from palletmask.masking import GeometricProducer, HeuristicProducer, MaskProducer
from palletmask.rl import MASK_MODES, VecEnv, _sample_rows, evaluate_policy, full_masks, train_policy

log = logging.getLogger(__name__)


def collect_states(cfg: RunConfig, states: int, rate: float, policy: str, seed: int) -> list[StatePair]:
    """Visit states with a uniformly random masked policy and capture ``states`` (state, box) pairs.

    ``policy`` picks the mask the random walker respects: ``"heuristic"`` or ``"random"`` (geometric only).
    """
    if policy not in ("heuristic", "random"):
        raise ValueError(f"unknown collection policy {policy!r}")
    producer = HeuristicProducer() if policy == "heuristic" else GeometricProducer()
    sampler = StateSampler(rate, states, [seed, 3])
    venv = VecEnv(cfg.scenario, cfg.noise, cfg.trainer.num_envs, seed)
    rng = np.random.default_rng([seed, 4])
    sc = cfg.scenario
    while len(sampler.pairs) < states:
        for s in venv.states:
            sampler(s)
        masks, _, _ = full_masks(venv.states, producer)
        acts, _ = _sample_rows(np.zeros(masks.shape), masks, rng, greedy=False)
        for e, s in enumerate(venv.states):
            res = step(s, decode_action(int(acts[e]), sc.buffer_capacity, sc.pallet), cfg.noise)
            venv.states[e] = venv._fresh() if res.done else res.next_state
    return sampler.pairs[:states]


def generate_dataset(
    cfg: RunConfig, states: int, rate: float = 0.25, policy: str = "heuristic", seed: int = 0, jobs: int = 1
) -> list[MaskSample]:
    """Collect states and oracle-label them. The result does not depend on ``jobs``."""
    pairs = collect_states(cfg, states, rate, policy, seed)
    return label_states(pairs, cfg.noise, seed, jobs=jobs)


@dataclass
class RunResult:
    mode: str
    seed: int
    mean_utilization: float
    std_utilization: float
    unstable_fraction: float
    final_train_utilization: float


def train_and_evaluate(cfg: RunConfig, mode: str, producer: MaskProducer, seed: int, eval_episodes: int) -> RunResult:
    """Train one policy under ``producer`` and evaluate it with the same mask on held-out episodes."""
    trainer = replace(cfg.trainer, rng_seed=seed, mask_mode=producer.name if producer.name in MASK_MODES else "none")
    scenario = replace(cfg.scenario, rng_seed=seed)
    policy, curve = train_policy(scenario, cfg.noise, trainer, producer)
    ev = evaluate_policy(policy, scenario, cfg.noise, producer, eval_episodes, 10_000 + seed)
    tail = [c["mean_utilization"] for c in curve[-5:] if np.isfinite(c["mean_utilization"])]
    unstable = sum(r == "unstable" for r in ev.termination_reasons) / max(1, len(ev.termination_reasons))
    result = RunResult(mode, seed, ev.mean_utilization, ev.std_utilization, unstable,
                       float(np.mean(tail)) if tail else float("nan"))
    log.info("%s seed %d: eval %.4f (unstable %.2f)", mode, seed, result.mean_utilization, unstable)
    return result


def compare_masks(
    cfg: RunConfig, producers: Mapping[str, MaskProducer], seeds: Sequence[int], eval_episodes: int = 20
) -> list[RunResult]:
    """Every (mode, seed) pair trained from scratch with the same budget."""
    return [train_and_evaluate(cfg, mode, prod, seed, eval_episodes) for seed in seeds for mode, prod in producers.items()]


def mode_means(results: Sequence[RunResult]) -> dict[str, float]:
    modes = dict.fromkeys(r.mode for r in results)
    return {m: float(np.mean([r.mean_utilization for r in results if r.mode == m])) for m in modes}
