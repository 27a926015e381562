"""``palletmask`` command line: gen-data, train-mask, train-policy, iterate, eval, compare, render, replay.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes ``manifest.json`` into its output directory; ``replay``
re-executes a manifest into a new directory.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from palletmask import __version__
from palletmask.config import ConfigError, RunConfig, config_to_dict, load_config

log = logging.getLogger("palletmask")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _load_cfg(path: Optional[str]) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _seeded(cfg: RunConfig, seed: int) -> RunConfig:
    cfg.scenario = replace(cfg.scenario, rng_seed=seed)
    cfg.trainer = replace(cfg.trainer, rng_seed=seed)
    cfg.mask_train = replace(cfg.mask_train, rng_seed=seed)
    return cfg


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _write_manifest(out: Path, command: str, args: dict, cfg: Optional[RunConfig], seed, started: str, outputs) -> None:
    from palletmask.reporting import write_json

    manifest = {
        "command": command,
        "args": args,
        "config": config_to_dict(cfg) if cfg is not None else None,
        "seed": seed,
        "code_version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": sorted(str(o) for o in outputs),
    }
    write_json(out / "manifest.json", manifest)


def _producer(spec: str, cfg: RunConfig):
    from palletmask.learn import load_mask_model
    from palletmask.masking import make_producer

    if spec.startswith("learned:"):
        path = _require_file(spec.split(":", 1)[1], "mask model checkpoint")
        return make_producer("learned", model=load_mask_model(path)), "learned"
    if spec == "learned":
        raise UsageError("--mask learned needs a checkpoint: learned:PATH")
    if spec not in ("none", "heuristic", "oracle"):
        raise UsageError(f"unknown mask mode {spec!r}")
    return make_producer(spec, noise=cfg.noise), spec


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(a) -> list[Path]:
    from palletmask.datasets import write_dataset
    from palletmask.experiments import generate_dataset
    from palletmask.reporting import write_json

    cfg = _seeded(_load_cfg(a.config), a.seed)
    out = _out_dir(a.out)
    samples = generate_dataset(cfg, a.states, a.rate, a.policy, a.seed, jobs=a.jobs)
    path = out / a.name
    write_dataset(path, samples)
    write_json(out / "metrics.json", {"records": len(samples), "positive_fraction": _pos_frac(samples)})
    return cfg, [path, out / "metrics.json"]


def _resolve_mask_spec(spec: str) -> str:
    if spec.startswith("learned:"):
        return "learned:" + str(Path(spec.split(":", 1)[1]).resolve())
    return spec


def _pos_frac(samples) -> float:
    if not samples:
        return 0.0
    return float(np.mean([s.mask.mean() for s in samples]))


def cmd_train_mask(a):
    from palletmask.datasets import read_dataset
    from palletmask.iterate import heuristic_iou
    from palletmask.learn import save_mask_model, train_mask_model
    from palletmask.reporting import plot_mask_training, write_csv, write_json

    cfg = _seeded(_load_cfg(a.config), a.seed)
    data_path = _require_file(a.dataset, "dataset")
    samples = read_dataset(data_path)
    if not samples:
        raise UsageError(f"dataset {data_path} is empty")
    out = _out_dir(a.out)
    model, report = train_mask_model(samples, cfg.mask_train)
    ckpt = out / "mask_model.ckpt"
    save_mask_model(model, ckpt)
    rows = [vars(r) for r in report.epochs]
    write_csv(out / "train_report.csv", rows, ["epoch", "train_loss", "val_loss", "val_iou"])
    plot_mask_training(rows, out / "train_report.png")
    from palletmask.learn import split_dataset

    _, val = split_dataset(samples, cfg.mask_train.validation_split, cfg.mask_train.rng_seed)
    best = report.epochs[report.best_epoch]
    write_json(out / "metrics.json", {
        "best_epoch": report.best_epoch,
        "val_iou": best.val_iou,
        "val_loss": best.val_loss,
        "heuristic_val_iou": heuristic_iou(val) if val else float("nan"),
        "train_size": report.train_size,
        "val_size": report.val_size,
    })
    return cfg, [ckpt, out / "train_report.csv", out / "train_report.png", out / "metrics.json"]


def cmd_train_policy(a):
    from palletmask.reporting import plot_learning_curves, write_csv, write_json
    from palletmask.rl import CURVE_FIELDS, evaluate_policy, save_policy, train_policy

    cfg = _seeded(_load_cfg(a.config), a.seed)
    if a.steps is not None:
        cfg.trainer = replace(cfg.trainer, total_steps=a.steps)
    producer, mode = _producer(a.mask, cfg)
    cfg.trainer = replace(cfg.trainer, mask_mode=mode)
    out = _out_dir(a.out)
    policy, curve = train_policy(cfg.scenario, cfg.noise, cfg.trainer, producer, checkpoint_dir=out)
    ckpt = out / "policy.ckpt"
    save_policy(policy, ckpt, extra={"mask": a.mask})
    write_csv(out / "curve.csv", curve, CURVE_FIELDS)
    plot_learning_curves({a.mask: curve}, out / "curve.png")
    ev = evaluate_policy(policy, cfg.scenario, cfg.noise, producer, a.eval_episodes, a.seed)
    write_json(out / "metrics.json", _eval_json(ev, a.eval_episodes))
    return cfg, [ckpt, out / "curve.csv", out / "curve.png", out / "metrics.json"]


def cmd_iterate(a):
    from palletmask.iterate import IterationConfig, run_iterations
    from palletmask.reporting import plot_iterations, write_json
    from palletmask.rl import save_policy

    cfg = _seeded(_load_cfg(a.config), a.seed)
    it = cfg.iteration
    if a.iterations is not None:
        it.iterations = a.iterations
    out = _out_dir(a.out)
    icfg = IterationConfig(cfg.scenario, cfg.noise, cfg.mask_train, cfg.trainer, it.iterations,
                           it.states_per_iteration, it.sampling_rate, it.eval_episodes, a.seed, a.jobs)
    best, report = run_iterations(icfg, out)
    save_policy(best, out / "best_policy.ckpt", extra={"iteration": report.best_iteration})
    data = report.as_dict()
    write_json(out / "iteration_report.json", data)
    plot_iterations(data["iterations"], out / "iterations.png")
    outputs = [p for p in out.iterdir() if p.name != "manifest.json"]
    return cfg, outputs


def cmd_compare(a):
    from dataclasses import asdict

    from palletmask.experiments import compare_masks, mode_means
    from palletmask.reporting import write_csv, write_json

    cfg = _seeded(_load_cfg(a.config), a.seed)
    if a.steps is not None:
        cfg.trainer = replace(cfg.trainer, total_steps=a.steps)
    if a.num_seeds < 1:
        raise UsageError("--num-seeds must be >= 1")
    producers = {}
    for spec in a.modes:
        producer, mode = _producer(spec, cfg)
        producers[mode] = producer
    out = _out_dir(a.out)
    results = compare_masks(cfg, producers, range(a.seed, a.seed + a.num_seeds), a.eval_episodes)
    rows = [asdict(r) for r in results]
    write_csv(out / "compare.csv", rows, list(rows[0]))
    write_json(out / "metrics.json", {"mean_utilization": mode_means(results), "runs": rows})
    return cfg, [out / "compare.csv", out / "metrics.json"]


def _eval_json(ev, episodes) -> dict:
    reasons: dict[str, int] = {}
    for r in ev.termination_reasons:
        reasons[r] = reasons.get(r, 0) + 1
    return {
        "episodes": episodes,
        "mean_utilization": ev.mean_utilization,
        "std_utilization": ev.std_utilization,
        "utilizations": ev.utilizations,
        "episode_lengths": ev.lengths,
        "termination_reasons": reasons,
    }


def cmd_eval(a):
    from palletmask.reporting import write_json
    from palletmask.rl import evaluate_policy, load_policy

    policy_path = _require_file(a.policy, "policy checkpoint")
    cfg = _seeded(_load_cfg(a.config), a.seed)
    policy = load_policy(policy_path)
    if policy.pallet != cfg.scenario.pallet or policy.capacity != cfg.scenario.buffer_capacity:
        raise UsageError("policy checkpoint does not match the scenario's pallet or buffer capacity")
    producer, _ = _producer(a.mask, cfg)
    out = _out_dir(a.out)
    trace: Optional[list] = [] if a.trace else None
    ev = evaluate_policy(policy, cfg.scenario, cfg.noise, producer, a.episodes, a.seed, greedy=a.greedy, trace=trace)
    outputs = [out / "metrics.json"]
    write_json(out / "metrics.json", _eval_json(ev, a.episodes))
    if trace is not None:
        p = cfg.scenario.pallet
        write_json(out / "trace.json", {
            "pallet": [p.length_cells, p.width_cells, p.max_height_cells],
            "episodes": [{"steps": t} for t in trace],
        })
        outputs.append(out / "trace.json")
    return cfg, outputs


def cmd_render(a):
    from palletmask.datasets import read_dataset
    from palletmask.reporting import ascii_heightmap, plot_heightmap, write_pgm

    src = _require_file(a.input, "input file")
    out = _out_dir(a.out)
    frames = []  # (name, heights, max_height)
    if src.suffix == ".json":
        data = json.loads(src.read_text())
        L, W, H = data["pallet"]
        episodes = data.get("episodes") or [{"steps": data.get("steps", [])}]
        for e, ep in enumerate(episodes):
            for t, st in enumerate(ep["steps"]):
                frames.append((f"ep{e:03d}_step{t:03d}", np.asarray(st["heightmap"]).reshape(L, W), H))
    else:
        for i, s in enumerate(read_dataset(src)):
            frames.append((f"sample{i:05d}", s.heightmap, s.pallet.max_height_cells))
    outputs = []
    last: dict[str, tuple] = {}
    for name, hm, H in frames:
        (out / f"{name}.txt").write_text(ascii_heightmap(hm, H))
        write_pgm(out / f"{name}.pgm", hm, H)
        outputs += [out / f"{name}.txt", out / f"{name}.pgm"]
        last[name.split("_")[0]] = (name, hm, H)
    if not a.no_figures:
        for name, hm, H in last.values():
            plot_heightmap(hm, H, out / f"{name}.png", title=name)
            outputs.append(out / f"{name}.png")
    return None, outputs


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-mask": cmd_train_mask,
    "train-policy": cmd_train_policy,
    "iterate": cmd_iterate,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "render": cmd_render,
}


# input-file flags per command, recorded as absolute paths in the manifest
PATH_ARGS = {"train-mask": ("dataset",), "eval": ("policy",), "render": ("input",)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="palletmask", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run configuration (see docs/schemas.md)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="labelling worker processes")

    sp = sub.add_parser("gen-data", help="visit states with a masked random policy and oracle-label them")
    common(sp)
    sp.add_argument("--states", type=int, default=2000, help="number of records to write")
    sp.add_argument("--rate", type=float, default=0.25, help="capture probability per visited state")
    sp.add_argument("--policy", choices=("heuristic", "random"), default="heuristic")
    sp.add_argument("--name", default="dataset.jsonl.gz", help="dataset file name inside --out")

    sp = sub.add_parser("train-mask", help="train the per-cell mask model on a dataset")
    common(sp)
    sp.add_argument("--dataset", required=True)

    sp = sub.add_parser("train-policy", help="masked PPO training")
    common(sp)
    sp.add_argument("--mask", default="heuristic", help="none | heuristic | oracle | learned:PATH")
    sp.add_argument("--steps", type=int, help="override trainer.total_steps")
    sp.add_argument("--eval-episodes", type=int, default=20)

    sp = sub.add_parser("iterate", help="iterative mask learning loop")
    common(sp)
    sp.add_argument("--iterations", type=int, help="override iteration.iterations")

    sp = sub.add_parser("eval", help="evaluate a policy checkpoint")
    common(sp)
    sp.add_argument("--policy", required=True)
    sp.add_argument("--mask", default="heuristic", help="none | heuristic | oracle | learned:PATH")
    sp.add_argument("--episodes", type=int, default=20)
    sp.add_argument("--greedy", action="store_true", help="argmax instead of sampling")
    sp.add_argument("--trace", action="store_true", help="also write per-step trace.json")

    sp = sub.add_parser("compare", help="train and evaluate one policy per (mask mode, seed)")
    common(sp)
    sp.add_argument("--modes", nargs="+", default=["none", "heuristic"], help="none | heuristic | oracle | learned:PATH")
    sp.add_argument("--num-seeds", type=int, default=1, help="run seeds SEED .. SEED+K-1")
    sp.add_argument("--steps", type=int, help="override trainer.total_steps")
    sp.add_argument("--eval-episodes", type=int, default=20)

    sp = sub.add_parser("render", help="ASCII + PGM (+ PNG) renders of a trace or dataset")
    common(sp, config=False)
    sp.add_argument("--input", required=True, help="trace.json from eval --trace, or a dataset .jsonl[.gz]")
    sp.add_argument("--no-figures", action="store_true", help="skip matplotlib PNGs")

    sp = sub.add_parser("replay", help="re-run a command from its manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=None)
    return p


def _run(command: str, a, argv_record: dict) -> int:
    started = _now()
    cfg, outputs = COMMANDS[command](a)
    _write_manifest(Path(a.out), command, argv_record, cfg, getattr(a, "seed", None), started, outputs)
    return 0


def _replay(a) -> int:
    manifest = json.loads(_require_file(a.manifest, "manifest").read_text())
    command = manifest["command"]
    if command not in COMMANDS:
        raise UsageError(f"manifest names unknown command {command!r}")
    out = _out_dir(a.out)
    args = dict(manifest["args"])
    if manifest.get("config") is not None:
        cfg_path = out / "config.json"
        cfg_path.write_text(json.dumps(manifest["config"], indent=2, sort_keys=True))
        args["config"] = str(cfg_path)
    args["out"] = str(out)
    if a.jobs is not None:
        args["jobs"] = a.jobs
    ns = argparse.Namespace(**args)
    return _run(command, ns, manifest["args"])


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if a.command == "replay":
            return _replay(a)
        record = {k: v for k, v in vars(a).items() if k not in ("command", "verbose")}
        for k in PATH_ARGS.get(a.command, ()):
            if record.get(k):
                record[k] = str(Path(record[k]).resolve())
        if isinstance(record.get("mask"), str):
            record["mask"] = _resolve_mask_spec(record["mask"])
        if record.get("modes"):
            record["modes"] = [_resolve_mask_spec(m) for m in record["modes"]]
        return _run(a.command, a, record)
    except (UsageError, ConfigError) as exc:
        print(f"palletmask: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"palletmask: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
