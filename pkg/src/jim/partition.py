"""Per-step greedy team partitioning over the agent visibility graph.

Teams are commander-led: a commander's observation is the team's local
state, and every member must be visible to the commander. The greedy pass
repeatedly promotes the unassigned agent that currently sees the most
unassigned agents; an exhaustive bitmask search doubles as the optimality
oracle for small agent counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PartitionError(ValueError):
    """A partition violated the exact-cover or commander-legality invariants."""


@dataclass(frozen=True)
class Team:
    commander: int
    members: frozenset[int]

    def __post_init__(self):
        if self.commander not in self.members:
            raise PartitionError(f"commander {self.commander} not in own team")


class VisibilityGraph:
    """Directed visibility: ``sees[i]`` is the set of agents in i's view, self included."""

    def __init__(self, sees):
        self.sees = [set(s) for s in sees]
        for i, s in enumerate(self.sees):
            s.add(i)
            bad = [j for j in s if not 0 <= j < len(self.sees)]
            if bad:
                raise PartitionError(f"agent {i} sees out-of-range agents {bad}")

    @property
    def n(self) -> int:
        return len(self.sees)

    def masks(self) -> list[int]:
        out = []
        for s in self.sees:
            m = 0
            for j in s:
                m |= 1 << j
            out.append(m)
        return out


class TeamPartition:
    """Exact cover of all agents into commander-led teams.

    ``visible_teammates[i]`` counts the members of agent i's own team that
    agent i can observe (self included); it is what the optimality gap is
    charged on. Partitions built without a graph default to full intra-team
    visibility.
    """

    def __init__(self, teams: list[Team], n: int,
                 graph: "VisibilityGraph | None" = None):
        self.teams = list(teams)
        self.n = n
        self._team_of = {}
        for idx, team in enumerate(self.teams):
            for a in team.members:
                if a in self._team_of:
                    raise PartitionError(f"agent {a} assigned twice")
                self._team_of[a] = idx
        if len(self._team_of) != n:
            missing = sorted(set(range(n)) - set(self._team_of))
            raise PartitionError(f"agents {missing} unassigned")
        self.visible_teammates = {}
        for team in self.teams:
            for a in team.members:
                if graph is None:
                    self.visible_teammates[a] = len(team.members)
                else:
                    self.visible_teammates[a] = len(graph.sees[a] & team.members)

    @property
    def m(self) -> int:
        return len(self.teams)

    def team_sizes(self) -> list[int]:
        return [len(t.members) for t in self.teams]

    def team_of(self, agent: int) -> int:
        return self._team_of[agent]

    def size_of_agents_team(self, agent: int) -> int:
        return len(self.teams[self._team_of[agent]].members)

    def validate(self, graph: VisibilityGraph):
        if graph.n != self.n:
            raise PartitionError("graph size mismatch")
        for t in self.teams:
            extra = t.members - graph.sees[t.commander]
            if extra:
                raise PartitionError(
                    f"members {sorted(extra)} invisible to commander {t.commander}")

    def as_records(self) -> list[dict]:
        return [{"commander": t.commander, "members": sorted(t.members)}
                for t in self.teams]


def greedy_partition(graph: VisibilityGraph, rng: np.random.Generator) -> TeamPartition:
    """Iteratively pick the unassigned agent with the largest unassigned view.

    That agent becomes commander of a team holding all its still-unassigned
    visible agents; ties between candidate commanders are broken uniformly
    at random, and the rng is consulted only when a tie actually occurs.
    """
    if graph.n < 1:
        raise PartitionError("need at least one agent")
    unassigned = set(range(graph.n))
    teams = []
    while unassigned:
        best_size = -1
        candidates: list[int] = []
        for i in sorted(unassigned):
            size = len(graph.sees[i] & unassigned)
            if size > best_size:
                best_size = size
                candidates = [i]
            elif size == best_size:
                candidates.append(i)
        if len(candidates) == 1:
            commander = candidates[0]
        else:
            commander = candidates[int(rng.integers(len(candidates)))]
        members = frozenset(graph.sees[commander] & unassigned)
        teams.append(Team(commander, members))
        unassigned -= members
    return TeamPartition(teams, graph.n, graph)


def optimality_gap(partition: TeamPartition, n: int, eps_gap: float) -> float:
    """Reward-decomposition gap: sum over agents of (2^(n - K_i) - 1) * eps.

    K_i counts agent i's visible teammates, self included, so under full
    mutual visibility one team covering everyone has gap exactly zero.
    """
    if eps_gap < 0:
        raise PartitionError("eps_gap must be nonnegative")
    total = 0.0
    for i in range(partition.n):
        k = partition.visible_teammates[i]
        if n - k < 0:
            raise PartitionError(
                f"agent {i} has {k} visible teammates but only {n} agents exist")
        total += (2.0 ** (n - k) - 1.0) * eps_gap
    return total


def brute_force_partition(graph: VisibilityGraph, eps_gap: float,
                          max_agents: int = 10) -> TeamPartition:
    """Exhaustive minimum-gap commander-led exact cover (bitmask DP).

    Searching every cover is exponential, hence the ``max_agents`` guard;
    the result is the ground-truth oracle the greedy pass is compared
    against.
    """
    n = graph.n
    if n > max_agents:
        raise PartitionError(f"brute force guarded at {max_agents} agents, got {n}")
    vis = graph.masks()
    full = (1 << n) - 1

    def block_cost(block: int) -> float:
        total = 0.0
        for i in range(n):
            if (block >> i) & 1:
                k = bin(vis[i] & block).count("1")
                total += (2.0 ** (n - k) - 1.0) * eps_gap
        return total

    best_cost: dict[int, float] = {0: 0.0}
    best_block: dict[int, tuple[int, int]] = {}

    def solve(mask: int) -> float:
        if mask in best_cost:
            return best_cost[mask]
        lowest = (mask & -mask).bit_length() - 1
        best = np.inf
        chosen = None
        for c in range(n):
            if not (mask >> c) & 1:
                continue
            avail = vis[c] & mask
            if not (avail >> lowest) & 1:
                continue
            required = (1 << lowest) | (1 << c)
            optional = avail & ~required
            # iterate all submasks of `optional`, descending
            sub = optional
            while True:
                block = sub | required
                cost = block_cost(block) + solve(mask & ~block)
                if cost < best:
                    best = cost
                    chosen = (block, c)
                if sub == 0:
                    break
                sub = (sub - 1) & optional
        best_cost[mask] = best
        best_block[mask] = chosen
        return best

    solve(full)
    teams = []
    mask = full
    while mask:
        block, commander = best_block[mask]
        members = frozenset(i for i in range(n) if (block >> i) & 1)
        teams.append(Team(commander, members))
        mask &= ~block
    return TeamPartition(teams, n, graph)


def random_visibility_graph(n: int, density: float, rng: np.random.Generator) -> VisibilityGraph:
    """Random directed graph where each ordered pair is visible with prob ``density``."""
    sees = []
    for i in range(n):
        s = {i}
        for j in range(n):
            if j != i and rng.random() < density:
                s.add(j)
        sees.append(s)
    return VisibilityGraph(sees)


@dataclass
class PartitionBenchReport:
    graphs_checked: int
    oracle_graphs: int
    greedy_optimal: int
    mean_gap_ratio: float
    max_gap_ratio: float
    violations: list[str]

    @property
    def passed(self) -> bool:
        return not self.violations

    def lines(self) -> list[str]:
        out = [
            f"graphs checked:        {self.graphs_checked}",
            f"oracle comparisons:    {self.oracle_graphs}",
            f"greedy met optimum:    {self.greedy_optimal}/{self.oracle_graphs}",
            f"mean greedy/opt ratio: {self.mean_gap_ratio:.4f}",
            f"max greedy/opt ratio:  {self.max_gap_ratio:.4f}",
        ]
        for v in self.violations:
            out.append(f"VIOLATION: {v}")
        out.append("partition-bench: " + ("PASS" if self.passed else "FAIL"))
        return out


def partition_benchmark(n_graphs: int = 1000, n_oracle: int = 200,
                        eps_gap: float = 0.01, seed: int = 0,
                        max_n: int = 12, oracle_max_n: int = 8) -> PartitionBenchReport:
    """Randomized sweep: cover/legality/determinism on ``n_graphs`` graphs,
    plus a brute-force gap comparison on ``n_oracle`` small graphs."""
    rng = np.random.default_rng(seed)
    violations = []
    for g_idx in range(n_graphs):
        n = int(rng.integers(1, max_n + 1))
        density = float(rng.uniform(0.0, 1.0))
        graph = random_visibility_graph(n, density, rng)
        tie_seed = int(rng.integers(2 ** 31))
        part = greedy_partition(graph, np.random.default_rng(tie_seed))
        try:
            part.validate(graph)
        except PartitionError as exc:
            violations.append(f"graph {g_idx}: {exc}")
            continue
        again = greedy_partition(graph, np.random.default_rng(tie_seed))
        if again.as_records() != part.as_records():
            violations.append(f"graph {g_idx}: greedy not deterministic under fixed seed")

    ratios = []
    greedy_optimal = 0
    for g_idx in range(n_oracle):
        n = int(rng.integers(2, oracle_max_n + 1))
        graph = random_visibility_graph(n, float(rng.uniform(0.0, 1.0)), rng)
        part = greedy_partition(graph, np.random.default_rng(g_idx))
        opt = brute_force_partition(graph, eps_gap)
        g_gap = optimality_gap(part, n, eps_gap)
        o_gap = optimality_gap(opt, n, eps_gap)
        if g_gap < o_gap - 1e-12:
            violations.append(
                f"oracle graph {g_idx}: greedy gap {g_gap} below optimum {o_gap}")
        if abs(g_gap - o_gap) <= 1e-12:
            greedy_optimal += 1
        ratios.append(g_gap / o_gap if o_gap > 0 else 1.0)
    return PartitionBenchReport(
        graphs_checked=n_graphs,
        oracle_graphs=n_oracle,
        greedy_optimal=greedy_optimal,
        mean_gap_ratio=float(np.mean(ratios)) if ratios else 1.0,
        max_gap_ratio=float(np.max(ratios)) if ratios else 1.0,
        violations=violations,
    )
