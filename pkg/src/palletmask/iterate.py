"""Iterative mask learning: train policy, sample its states, label, aggregate, retrain the mask."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from palletmask.core import NUM_ORIENTATIONS, OrientedBox, orient
from palletmask.datasets import MaskSample, deduplicate, write_dataset
from palletmask.env import EnvState, NoiseConfig, ScenarioConfig
from palletmask.learn import MaskModel, TrainConfig, evaluate_iou, save_mask_model, train_mask_model
from palletmask.masking import HeuristicProducer, LearnedProducer, heuristic_mask, pooled_iou
from palletmask.rl import PolicyNet, TrainerConfig, evaluate_policy, save_policy, train_policy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StatePair:
    """A visited state and one oriented buffer box to label on it."""

    state: EnvState
    box: OrientedBox
    weight: float


class StateSampler:
    """Captures each observed state with probability ``rate`` until ``budget`` pairs are held."""

    def __init__(self, rate: float, budget: int, seed):
        if not 0 < rate <= 1:
            raise ValueError("sampling rate must be in (0, 1]")
        self.rate = rate
        self.budget = budget
        self.rng = np.random.default_rng(seed)
        self.pairs: list[StatePair] = []
        self.seen = 0

    def __call__(self, state: EnvState) -> None:
        self.seen += 1
        if len(self.pairs) >= self.budget:
            return
        if self.rate < 1 and self.rng.random() >= self.rate:
            return
        eligible = [(slot, code) for slot, b in enumerate(state.buffer) if b is not None for code in range(NUM_ORIENTATIONS)]
        if not eligible:
            return
        slot, code = eligible[self.rng.integers(len(eligible))]
        box = state.buffer[slot]
        self.pairs.append(StatePair(state, orient(box, code), box.weight))


def sample_states(states: Iterable[EnvState], rate: float, budget: int, seed) -> list[StatePair]:
    sampler = StateSampler(rate, budget, seed)
    for s in states:
        if len(sampler.pairs) >= budget:
            break
        sampler(s)
    return sampler.pairs


def _label_one(args) -> MaskSample:
    from palletmask.stability import label_mask

    pair, noise, key = args
    mask = label_mask(pair.state, pair.box, noise, seed=key, weight=pair.weight)
    return MaskSample(pair.state.heights.copy(), pair.box.dims, mask, pair.state.pallet, pair.weight)


def label_states(pairs: Sequence[StatePair], noise: NoiseConfig, seed: int, jobs: int = 1) -> list[MaskSample]:
    """Oracle-label every pair. Pair i uses draw key (seed, i), so output is independent of ``jobs``."""
    work = [(p, noise, (seed, i)) for i, p in enumerate(pairs)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_label_one, work, chunksize=max(1, len(work) // (4 * jobs))))
    return [_label_one(w) for w in work]


def heuristic_iou(samples: Sequence[MaskSample]) -> float:
    preds = [heuristic_mask(s.heightmap, OrientedBox(*s.box), s.pallet) for s in samples]
    return pooled_iou(preds, [s.mask for s in samples])


@dataclass
class IterationConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    mask_train: TrainConfig = field(default_factory=TrainConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    iterations: int = 5
    states_per_iteration: int = 2000
    sampling_rate: float = 0.25
    eval_episodes: int = 20
    rng_seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError("sampling_rate must be in (0, 1]")


@dataclass
class IterationRecord:
    iteration: int
    mask_mode: str
    new_samples: int
    dataset_size: int
    fresh_iou: float  # IoU of the mask used in this iteration, on the states this iteration sampled
    heuristic_fresh_iou: float
    mask_val_iou: float  # held-out IoU of the mask model retrained after this iteration
    eval_mean_utilization: float
    eval_std_utilization: float


@dataclass
class IterationReport:
    records: list[IterationRecord] = field(default_factory=list)
    best_iteration: int = -1

    def as_dict(self) -> dict:
        from dataclasses import asdict

        return {"best_iteration": self.best_iteration, "iterations": [asdict(r) for r in self.records]}


def run_iterations(config: IterationConfig, out_dir: Optional[Path] = None) -> tuple[PolicyNet, IterationReport]:
    """Iteration 0 trains with the heuristic mask; iterations 1..N train with the latest learned mask."""
    report = IterationReport()
    dataset: list[MaskSample] = []
    mask_model: Optional[MaskModel] = None
    best: tuple[float, int, Optional[PolicyNet]] = (-np.inf, -1, None)
    seeds = np.random.SeedSequence(config.rng_seed).spawn(config.iterations + 1)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for it in range(config.iterations + 1):
        s_train, s_sample, s_label, s_mask, s_eval = (int(v) for v in seeds[it].generate_state(5) >> 1)
        if it == 0:
            producer, mode = HeuristicProducer(), "heuristic"
        else:
            producer, mode = LearnedProducer(mask_model), "learned"
        trainer = replace(config.trainer, mask_mode=mode, rng_seed=s_train)
        sampler = StateSampler(config.sampling_rate, config.states_per_iteration, s_sample)
        policy, curve = train_policy(config.scenario, config.noise, trainer, producer, state_sink=sampler)
        fresh = label_states(sampler.pairs, config.noise, s_label, jobs=config.jobs)
        fresh_iou = heuristic_iou(fresh) if mask_model is None else evaluate_iou(mask_model, fresh)
        h_iou = heuristic_iou(fresh)
        before = len(dataset)
        dataset = deduplicate(dataset + fresh)
        mask_model, mreport = train_mask_model(dataset, replace(config.mask_train, rng_seed=s_mask))
        val_iou = mreport.epochs[mreport.best_epoch].val_iou
        ev = evaluate_policy(policy, config.scenario, config.noise, producer, config.eval_episodes, s_eval)
        rec = IterationRecord(
            it, mode, len(fresh), len(dataset), fresh_iou, h_iou, val_iou, ev.mean_utilization, ev.std_utilization
        )
        report.records.append(rec)
        log.info("iteration %d: |D| %d (+%d) fresh IoU %.4f util %.4f", it, len(dataset), len(dataset) - before,
                 fresh_iou, ev.mean_utilization)
        if ev.mean_utilization > best[0]:
            best = (ev.mean_utilization, it, policy)
        if out_dir is not None:
            save_policy(policy, out_dir / f"policy_iter{it}.ckpt")
            save_mask_model(mask_model, out_dir / f"mask_iter{it}.ckpt")
            write_dataset(out_dir / f"dataset_iter{it}.jsonl.gz", fresh)
            _write_curve(out_dir / f"curve_iter{it}.csv", curve)
    report.best_iteration = best[1]
    return best[2], report


def _write_curve(path: Path, curve: list[dict]) -> None:
    from palletmask.reporting import write_csv

    write_csv(path, curve)
