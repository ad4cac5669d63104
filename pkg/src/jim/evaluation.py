"""Greedy evaluation, ad-hoc team-play evaluation and intention analytics.

Evaluation never mutates network parameters. The intention analytics read
trajectory dumps (JSONL) and produce the four CSV tables: selection counts,
observer counts, continuity run lengths and the intention/joint-action
co-occurrence table, each with raw and normalized columns.
"""

from __future__ import annotations

import glob
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .env import ACTION_ATTACK, GRID_KINDS
from .io_utils import read_jsonl, write_csv
from .policy import NetworkBundle
from .trainer import greedy_eval, run_training


class DumpFormatError(ValueError):
    """Trajectory dump lacks the records the analytics need."""


@dataclass
class EvalMetrics:
    episodes: int
    mean_return_per_agent: float
    success_rate: float
    returns: list = field(default_factory=list)
    per_seed: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError(f"success rate {self.success_rate} outside [0, 1]")


def evaluate(nets: NetworkBundle, cfg: ExperimentConfig, episodes: int,
             seed: int = 0, *, mode: str | None = None,
             forced_z: int | None = None, dump: list | None = None) -> EvalMetrics:
    """Greedy rollouts; per-agent return is the shared episode return divided
    by the agent count."""
    out = greedy_eval(nets, cfg, episodes, np.random.default_rng(seed),
                      mode=mode, forced_z=forced_z, dump=dump)
    return EvalMetrics(episodes=out["episodes"],
                       mean_return_per_agent=out["mean_return_per_agent"],
                       success_rate=out["success_rate"], returns=out["returns"])


def adhoc_evaluate(nets: NetworkBundle, cfg: ExperimentConfig, delta: int,
                   rng: np.random.Generator, episodes: int,
                   mode: str | None = None) -> EvalMetrics:
    """Each episode draws its agent count uniformly from [n - delta, n + delta]
    and evaluates greedily with the shared (size-agnostic) policy."""
    if cfg.env.kind not in GRID_KINDS:
        raise ValueError("ad-hoc evaluation applies to grid environments")
    base = cfg.env.n_agents
    if base + delta > cfg.max_agents:
        raise ValueError(
            f"agent-id encoding supports {cfg.max_agents} agents; "
            f"base {base} + delta {delta} exceeds it")
    returns, successes = [], []
    counts = []
    for _ in range(episodes):
        n = int(rng.integers(base - delta, base + delta + 1))
        if n < 1:
            warnings.warn("drawn agent count < 1; clamped to 1")
            n = 1
        counts.append(n)
        out = greedy_eval(nets, cfg, 1, rng, mode=mode, n_agents=n)
        returns.append(out["mean_return_per_agent"])
        successes.append(out["success_rate"])
    return EvalMetrics(
        episodes=episodes,
        mean_return_per_agent=float(np.mean(returns)),
        success_rate=float(np.mean(successes)),
        returns=returns,
        per_seed={"drawn_counts": counts},
    )


# -- intention analytics -------------------------------------------------------

CO_BUCKETS = ("all_attack", "all_move", "mixed")


@dataclass
class IntentionReport:
    n_intentions: int
    selection_counts: np.ndarray      # [Z] commander choices
    observer_counts: np.ndarray       # [Z] member own-observation choices
    continuity: dict                  # run length -> count
    agreement: float                  # member choice == commander choice
    cooccurrence: np.ndarray          # [len(CO_BUCKETS), Z]

    @property
    def mean_run_length(self) -> float:
        total = sum(self.continuity.values())
        if total == 0:
            return 0.0
        return sum(k * v for k, v in self.continuity.items()) / total

    def tv_distance(self) -> float:
        s, o = self.selection_counts.sum(), self.observer_counts.sum()
        if s == 0 or o == 0:
            return 0.0
        return 0.5 * float(np.abs(self.selection_counts / s
                                  - self.observer_counts / o).sum())


def _bucket(actions: list, members: list) -> str:
    acts = [actions[m] for m in members]
    if all(a == ACTION_ATTACK for a in acts):
        return "all_attack"
    if all(a != ACTION_ATTACK for a in acts):
        return "all_move"
    return "mixed"


def intention_stats(dumps) -> IntentionReport:
    """Aggregate intention analytics from trajectory dump files.

    ``dumps`` is a directory, a glob-able path or a list of JSONL files.
    Continuity counts runs of consecutive steps during which an agent kept
    the same intention, per agent per episode.
    """
    if isinstance(dumps, (str, os.PathLike)):
        if os.path.isdir(dumps):
            files = sorted(glob.glob(os.path.join(str(dumps), "**", "*.jsonl"),
                                     recursive=True))
        else:
            files = sorted(glob.glob(str(dumps)))
    else:
        files = [str(d) for d in dumps]
    if not files:
        raise DumpFormatError(f"no dump files found under {dumps!r}")

    n_intentions = None
    selection = None
    observer = None
    cooccurrence = None
    continuity: dict[int, int] = {}
    agree_hits = 0
    agree_total = 0

    for path in files:
        records, header = read_jsonl(path)
        if header and n_intentions is None:
            n_intentions = int(header.get("n_intentions", 0)) or None
        # group per episode, preserving step order
        episodes: dict[int, list] = {}
        for rec in records:
            if "teams" not in rec or "step" not in rec:
                raise DumpFormatError(f"{path}: record without partition data")
            episodes.setdefault(rec.get("episode", 0), []).append(rec)
        for recs in episodes.values():
            recs.sort(key=lambda r: r["step"])
            per_agent: dict[int, list[int]] = {}
            for rec in recs:
                if not rec["teams"]:
                    raise DumpFormatError(
                        f"{path}: step {rec['step']} carries no partition record")
                for team in rec["teams"]:
                    z = int(team["z"])
                    if n_intentions is None:
                        n_intentions = max(16, z + 1)
                    if selection is None:
                        selection = np.zeros(n_intentions)
                        observer = np.zeros(n_intentions)
                        cooccurrence = np.zeros((len(CO_BUCKETS), n_intentions))
                    selection[z] += 1
                    bucket = _bucket(rec["actions"], team["members"])
                    cooccurrence[CO_BUCKETS.index(bucket), z] += 1
                    for member, choice in zip(team["members"],
                                              team.get("member_greedy", [])):
                        if choice >= 0:
                            observer[int(choice)] += 1
                            agree_total += 1
                            if int(choice) == z:
                                agree_hits += 1
                        per_agent.setdefault(int(member), []).append(z)
            for zs in per_agent.values():
                run = 0
                prev = None
                for z in zs:
                    if prev is not None and z == prev:
                        run += 1
                    else:
                        if run:
                            continuity[run] = continuity.get(run, 0) + 1
                        run = 1
                    prev = z
                if run:
                    continuity[run] = continuity.get(run, 0) + 1

    if selection is None:
        raise DumpFormatError("dumps contained no team records")
    return IntentionReport(
        n_intentions=n_intentions,
        selection_counts=selection,
        observer_counts=observer,
        continuity=continuity,
        agreement=(agree_hits / agree_total) if agree_total else 0.0,
        cooccurrence=cooccurrence,
    )


def _count_rows(counts: np.ndarray):
    total = counts.sum()
    peak = counts.max()
    rows = []
    for z, c in enumerate(counts):
        rows.append([z, int(c),
                     float(c / total) if total else 0.0,
                     float(c / peak) if peak else 0.0])
    return rows


def write_intention_csvs(report: IntentionReport, out_dir, seed=None,
                         cfg_hash=None) -> list[str]:
    """Emit selection.csv, observer.csv, continuity.csv, cooccurrence.csv."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    path = os.path.join(out_dir, "selection.csv")
    write_csv(path, ("z", "count", "fraction", "max_normalized"),
              _count_rows(report.selection_counts), seed=seed, cfg_hash=cfg_hash)
    paths.append(path)

    path = os.path.join(out_dir, "observer.csv")
    write_csv(path, ("z", "count", "fraction", "max_normalized"),
              _count_rows(report.observer_counts), seed=seed, cfg_hash=cfg_hash,
              extra_comment=f"agreement={report.agreement!r}")
    paths.append(path)

    path = os.path.join(out_dir, "continuity.csv")
    total = sum(report.continuity.values())
    rows = [[k, v, v / total if total else 0.0]
            for k, v in sorted(report.continuity.items())]
    write_csv(path, ("run_length", "count", "fraction"), rows, seed=seed,
              cfg_hash=cfg_hash,
              extra_comment=f"mean_run_length={report.mean_run_length!r}")
    paths.append(path)

    path = os.path.join(out_dir, "cooccurrence.csv")
    rows = []
    total = report.cooccurrence.sum()
    for b, bucket in enumerate(CO_BUCKETS):
        for z in range(report.n_intentions):
            c = report.cooccurrence[b, z]
            rows.append([bucket, z, int(c), float(c / total) if total else 0.0])
    write_csv(path, ("joint_action_bucket", "z", "count", "fraction"), rows,
              seed=seed, cfg_hash=cfg_hash)
    paths.append(path)
    return paths


# -- ablations ------------------------------------------------------------------


def ablate(nets_or_cfg, cfg: ExperimentConfig, ablation: str, *, seed: int = 0,
           episodes: int = 100, out_dir: str | None = None):
    """zero_intention: evaluate a trained bundle with every team's intention
    pinned to index 0. no_weighting: a full training run with unit alphas."""
    if ablation == "zero_intention":
        nets = nets_or_cfg
        if not isinstance(nets, NetworkBundle):
            raise ValueError("zero_intention needs a trained NetworkBundle")
        return evaluate(nets, cfg, episodes, seed=seed, forced_z=0)
    if ablation == "no_weighting":
        from dataclasses import replace

        run_cfg = replace(cfg, mode="no_weighting")
        if out_dir is None:
            raise ValueError("no_weighting ablation needs an output directory")
        return run_training(run_cfg, seed, out_dir)
    raise ValueError(f"unknown ablation {ablation!r}")


def checkpoint_fingerprint(path) -> str:
    import hashlib

    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def retention(adhoc_return: float, fixed_return: float,
              floor: float = 0.1) -> float:
    """Ad-hoc return as a fraction of the fixed-size return.

    Returns below ``floor`` carry no meaningful performance to retain, so the
    denominator is floored to keep near-zero baselines from exploding the
    ratio.
    """
    return adhoc_return / max(fixed_return, floor)


__all__ = [
    "EvalMetrics", "IntentionReport", "DumpFormatError", "evaluate",
    "adhoc_evaluate", "intention_stats", "write_intention_csvs", "ablate",
    "checkpoint_fingerprint", "retention", "CO_BUCKETS",
]
