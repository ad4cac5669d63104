"""Dec-POMDP environments: predator-prey gridworlds and one-step matrix games.

Gridworlds place walls, agents and prey at random on a rectangular map.
Every agent observes an egocentric window plus its normalized position and
last action; all agents share one scalar reward per step. Prey run a
scripted escape policy. The matrix game is the standard non-monotonic
penalty fixture: one joint action, one payoff, done.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .partition import VisibilityGraph

ACTION_STAY = 0
ACTION_UP = 1
ACTION_DOWN = 2
ACTION_LEFT = 3
ACTION_RIGHT = 4
ACTION_ATTACK = 5
GRID_N_ACTIONS = 6
GRID_ACTION_NAMES = ("stay", "up", "down", "left", "right", "attack")

# (dx, dy) with y growing downward
_MOVE_DELTAS = {
    ACTION_UP: (0, -1),
    ACTION_DOWN: (0, 1),
    ACTION_LEFT: (-1, 0),
    ACTION_RIGHT: (1, 0),
}

GRID_KINDS = ("pursuit", "pursuit_hard", "tiger")
MINIMAP_SIZE = 10

# default payoff for the matrix penalty game; optimum is joint (0, 0) -> 11,
# the safe misdirection cells are (1, 1) -> 7 and (2, 2) -> 5
CLIMBING_PAYOFF = ((11.0, -30.0, 0.0), (-30.0, 7.0, 6.0), (0.0, 0.0, 5.0))


class ConfigError(ValueError):
    """Invalid or infeasible environment configuration."""


class EnvError(RuntimeError):
    """Illegal interaction with a live environment (e.g. stepping when done)."""


@dataclass
class EnvConfig:
    kind: str = "pursuit"
    n_agents: int = 6
    n_enemies: int = 4
    map_w: int = 60
    map_h: int = 60
    n_walls: int = 60
    view_radius: int = 3
    attack_range: int = 1
    episode_limit: int = 350
    catch_reward: float = 10.0
    solo_penalty: float = -2.0
    per_hit_reward: float = 1.0
    prey_hp: int = 5
    prey_regen: int = 1
    payoff_matrix: tuple | None = None
    seed: int = 0

    def validate(self):
        if self.n_agents < 1:
            raise ConfigError("env.n_agents: need at least one agent")
        if self.episode_limit < 1:
            raise ConfigError("env.episode_limit: must be >= 1")
        if self.kind in GRID_KINDS:
            need = 2 * self.view_radius + 1
            if self.map_w < need or self.map_h < need:
                raise ConfigError(
                    f"env.map_w/map_h: map must be at least {need} cells for "
                    f"view_radius {self.view_radius}")
            if self.n_enemies < 1:
                raise ConfigError("env.n_enemies: grid kinds need prey")
            cells = self.map_w * self.map_h
            if self.n_walls + self.n_agents + self.n_enemies > cells:
                raise ConfigError("env: more entities than map cells")
        elif self.kind == "matrix_game":
            m = self.payoff_matrix
            if m is None:
                raise ConfigError("env.payoff_matrix: required for matrix_game")
            if self.n_agents != 2:
                raise ConfigError("env.n_agents: matrix_game supports exactly 2 agents")
            rows = len(m)
            if rows < 2 or any(len(r) != rows for r in m):
                raise ConfigError("env.payoff_matrix: must be a square matrix, side >= 2")
        else:
            raise ConfigError(f"env.kind: unknown kind {self.kind!r}")
        return self


# Named presets. pursuit / pursuit_hard / tiger carry the reference scenario
# sizes; pursuit_small is the desk-scale variant used by CI and the
# acceptance suite; matrix_penalty is the climbing penalty game.
ENV_PRESETS = {
    "pursuit": dict(kind="pursuit", n_agents=6, n_enemies=4, map_w=60, map_h=60,
                    n_walls=60, episode_limit=350),
    "pursuit_hard": dict(kind="pursuit_hard", n_agents=6, n_enemies=6, map_w=100,
                         map_h=100, n_walls=300, episode_limit=350),
    "tiger": dict(kind="tiger", n_agents=6, n_enemies=24, map_w=40, map_h=40,
                  n_walls=60, episode_limit=350),
    # desk-scale: attack range matches the view radius ("attack what you can
    # see") and the catch/solo magnitudes keep the solo-vs-pair dilemma while
    # making coordination events frequent enough to learn from in 150k steps
    "pursuit_small": dict(kind="pursuit", n_agents=4, n_enemies=2, map_w=20,
                          map_h=20, n_walls=10, episode_limit=60,
                          attack_range=3, catch_reward=30.0, solo_penalty=-1.0),
    "matrix_penalty": dict(kind="matrix_game", n_agents=2, n_enemies=0, map_w=2,
                           map_h=2, n_walls=0, episode_limit=1,
                           payoff_matrix=CLIMBING_PAYOFF),
}


def env_preset(name: str, **overrides) -> EnvConfig:
    if name not in ENV_PRESETS:
        raise ConfigError(f"env preset: unknown preset {name!r} "
                          f"(have {sorted(ENV_PRESETS)})")
    params = dict(ENV_PRESETS[name])
    params.update(overrides)
    return EnvConfig(**params).validate()


def obs_dim_for(config: EnvConfig) -> int:
    if config.kind in GRID_KINDS:
        side = 2 * config.view_radius + 1
        return side * side * 3 + 2 + GRID_N_ACTIONS
    return 1 + 2 * len(config.payoff_matrix)


def state_dim_for(config: EnvConfig) -> int:
    if config.kind in GRID_KINDS:
        return MINIMAP_SIZE * MINIMAP_SIZE * 3
    return config.n_agents * len(config.payoff_matrix)


def n_actions_for(config: EnvConfig) -> int:
    if config.kind in GRID_KINDS:
        return GRID_N_ACTIONS
    return len(config.payoff_matrix)


def make_env(config: EnvConfig):
    config.validate()
    if config.kind in GRID_KINDS:
        return GridEnv(config)
    return MatrixGameEnv(config)


class GridEnv:
    """Predator-prey gridworld with simultaneous moves and scripted prey.

    Step order: attacks resolve against current positions, agent moves
    resolve in index order (lower index wins contested cells), prey escape,
    tiger prey regenerate. Attack adjacency uses Chebyshev distance.
    """

    def __init__(self, config: EnvConfig, n_agents: int | None = None):
        self.config = config
        self.n_agents = n_agents if n_agents is not None else config.n_agents
        self.n_actions = GRID_N_ACTIONS
        self.obs_dim = obs_dim_for(config)
        self.state_dim = state_dim_for(config)
        self._pursuit = config.kind in ("pursuit", "pursuit_hard")
        self.rng = np.random.default_rng(config.seed)
        self.reset(config.seed)

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int | None = None):
        cfg = self.config
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        w, h = cfg.map_w, cfg.map_h
        total = cfg.n_walls + self.n_agents + cfg.n_enemies
        if total > w * h:
            raise ConfigError("env: more entities than map cells")
        cells = self.rng.choice(w * h, size=total, replace=False)
        coords = [(int(c % w), int(c // w)) for c in cells]
        walls = coords[:cfg.n_walls]
        self.agent_pos = list(coords[cfg.n_walls:cfg.n_walls + self.n_agents])
        self.prey_pos = list(coords[cfg.n_walls + self.n_agents:])
        self.prey_hp = [cfg.prey_hp] * cfg.n_enemies
        self.prey_alive = [True] * cfg.n_enemies
        self.last_action = np.zeros(self.n_agents, dtype=np.int64)
        self.has_acted = False
        self.step_count = 0
        self.done = False

        r = cfg.view_radius
        self.wall_set = set(walls)
        # padded layers: out-of-map cells read as wall
        self._wall_layer = np.ones((h + 2 * r, w + 2 * r))
        self._wall_layer[r:r + h, r:r + w] = 0.0
        for (x, y) in walls:
            self._wall_layer[y + r, x + r] = 1.0
        self._ally_layer = np.zeros((h + 2 * r, w + 2 * r))
        self._prey_layer = np.zeros((h + 2 * r, w + 2 * r))
        self._dirty_cells: list[tuple[int, int]] = []
        return self.observations()

    # -- observations ------------------------------------------------------

    def _refresh_layers(self):
        r = self.config.view_radius
        for (py, px) in self._dirty_cells:
            self._ally_layer[py, px] = 0.0
            self._prey_layer[py, px] = 0.0
        self._dirty_cells = []
        for (x, y) in self.agent_pos:
            self._ally_layer[y + r, x + r] = 1.0
            self._dirty_cells.append((y + r, x + r))
        for pid, (x, y) in enumerate(self.prey_pos):
            if self.prey_alive[pid]:
                self._prey_layer[y + r, x + r] = 1.0
                self._dirty_cells.append((y + r, x + r))

    def observations(self) -> list[np.ndarray]:
        cfg = self.config
        r = cfg.view_radius
        side = 2 * r + 1
        self._refresh_layers()
        out = []
        wnorm = max(cfg.map_w - 1, 1)
        hnorm = max(cfg.map_h - 1, 1)
        for i, (x, y) in enumerate(self.agent_pos):
            ally = self._ally_layer[y:y + side, x:x + side].copy()
            ally[r, r] = 0.0  # own cell is not an ally
            prey = self._prey_layer[y:y + side, x:x + side]
            wall = self._wall_layer[y:y + side, x:x + side]
            vec = np.empty(self.obs_dim)
            k = side * side
            vec[:k] = ally.ravel()
            vec[k:2 * k] = prey.ravel()
            vec[2 * k:3 * k] = wall.ravel()
            vec[3 * k] = x / wnorm
            vec[3 * k + 1] = y / hnorm
            act = np.zeros(GRID_N_ACTIONS)
            if self.has_acted:
                act[self.last_action[i]] = 1.0
            vec[3 * k + 2:] = act
            out.append(vec)
        return out

    def global_state(self) -> np.ndarray:
        """10x10x3 occupancy counts (agents, prey, walls), scaled to [0, 1]."""
        cfg = self.config
        bw = -(-cfg.map_w // MINIMAP_SIZE)  # ceil division
        bh = -(-cfg.map_h // MINIMAP_SIZE)
        norm = float(bw * bh)
        grid = np.zeros((MINIMAP_SIZE, MINIMAP_SIZE, 3))
        for (x, y) in self.agent_pos:
            grid[y // bh, x // bw, 0] += 1.0
        for pid, (x, y) in enumerate(self.prey_pos):
            if self.prey_alive[pid]:
                grid[y // bh, x // bw, 1] += 1.0
        for (x, y) in self.wall_set:
            grid[y // bh, x // bw, 2] += 1.0
        return grid.ravel() / norm

    def visibility(self) -> VisibilityGraph:
        r = self.config.view_radius
        sees = []
        for i, (xi, yi) in enumerate(self.agent_pos):
            s = {i}
            for j, (xj, yj) in enumerate(self.agent_pos):
                if j != i and max(abs(xi - xj), abs(yi - yj)) <= r:
                    s.add(j)
            sees.append(s)
        return VisibilityGraph(sees)

    # -- dynamics ----------------------------------------------------------

    def _occupied(self) -> set:
        occ = set(self.agent_pos)
        for pid, pos in enumerate(self.prey_pos):
            if self.prey_alive[pid]:
                occ.add(pos)
        return occ

    def _free(self, pos, occ) -> bool:
        x, y = pos
        return (0 <= x < self.config.map_w and 0 <= y < self.config.map_h
                and pos not in self.wall_set and pos not in occ)

    def step(self, actions):
        if self.done:
            raise EnvError("step() called on a finished episode")
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n_agents,):
            raise ConfigError(
                f"joint action length {actions.shape} != agent count {self.n_agents}")
        cfg = self.config
        reward = 0.0
        info = {"catches": [], "kills": [], "solo_attacks": [], "hits": 0,
                "prey_alive": 0}

        # attacks target the nearest living prey in range (ties: lowest id)
        attackers: dict[int, list[int]] = {}
        for i in np.nonzero(actions == ACTION_ATTACK)[0]:
            xi, yi = self.agent_pos[i]
            best = None
            for pid, (px, py) in enumerate(self.prey_pos):
                if not self.prey_alive[pid]:
                    continue
                d = max(abs(px - xi), abs(py - yi))
                if d <= cfg.attack_range and (best is None or (d, pid) < best):
                    best = (d, pid)
            if best is not None:
                attackers.setdefault(best[1], []).append(int(i))
        for pid, hunters in sorted(attackers.items()):
            if len(hunters) == 1:
                reward += cfg.solo_penalty
                info["solo_attacks"].append(hunters[0])
            elif self._pursuit:
                reward += cfg.catch_reward
                self.prey_alive[pid] = False
                info["catches"].append({"prey": pid, "agents": hunters})
            else:  # tiger: each hit chips HP and pays out per hit
                hits = len(hunters)
                reward += cfg.per_hit_reward * hits
                info["hits"] += hits
                self.prey_hp[pid] -= hits
                if self.prey_hp[pid] <= 0:
                    self.prey_alive[pid] = False
                    info["kills"].append({"prey": pid, "agents": hunters})

        # agent moves, index order; blocked or contested targets mean "stay"
        occ = self._occupied()
        for i, a in enumerate(actions):
            if a not in _MOVE_DELTAS:
                continue
            dx, dy = _MOVE_DELTAS[int(a)]
            old = self.agent_pos[i]
            new = (old[0] + dx, old[1] + dy)
            if self._free(new, occ):
                occ.discard(old)
                occ.add(new)
                self.agent_pos[i] = new

        self._step_prey(occ)

        if not self._pursuit and cfg.prey_regen:
            for pid in range(len(self.prey_pos)):
                if self.prey_alive[pid]:
                    self.prey_hp[pid] = min(cfg.prey_hp,
                                            self.prey_hp[pid] + cfg.prey_regen)

        self.last_action = actions.copy()
        self.has_acted = True
        self.step_count += 1
        alive = sum(self.prey_alive)
        info["prey_alive"] = alive
        self.done = alive == 0 or self.step_count >= cfg.episode_limit
        return self.observations(), float(reward), self.done, info

    def _step_prey(self, occ):
        """Escape policy: flee to the free neighbor maximizing distance to the
        nearest agent (stay is a candidate); wander when no agent is near."""
        cfg = self.config
        sight = 2 * cfg.view_radius
        for pid, pos in enumerate(self.prey_pos):
            if not self.prey_alive[pid]:
                continue
            x, y = pos
            neighbors = []
            for dx, dy in _MOVE_DELTAS.values():
                cand = (x + dx, y + dy)
                if self._free(cand, occ):
                    neighbors.append(cand)
            near = [(ax, ay) for (ax, ay) in self.agent_pos
                    if max(abs(ax - x), abs(ay - y)) <= sight]
            if near:
                candidates = [pos] + neighbors

                def dist(c):
                    return min((c[0] - ax) ** 2 + (c[1] - ay) ** 2
                               for (ax, ay) in near)

                best = max(dist(c) for c in candidates)
                ties = [c for c in candidates if dist(c) == best]
                new = ties[int(self.rng.integers(len(ties)))] if len(ties) > 1 else ties[0]
            elif neighbors:
                new = neighbors[int(self.rng.integers(len(neighbors)))]
            else:
                new = pos
            if new != pos:
                occ.discard(pos)
                occ.add(new)
                self.prey_pos[pid] = new


class MatrixGameEnv:
    """One-shot two-player matrix game; the terminal observation encodes the
    joint action so intention posteriors can read what happened."""

    def __init__(self, config: EnvConfig, n_agents: int | None = None):
        self.config = config
        self.n_agents = config.n_agents
        self.payoff = np.asarray(config.payoff_matrix, dtype=np.float64)
        self.n_actions = self.payoff.shape[0]
        self.obs_dim = obs_dim_for(config)
        self.state_dim = state_dim_for(config)
        self.rng = np.random.default_rng(config.seed)
        self.reset(config.seed)

    def reset(self, seed: int | None = None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.step_count = 0
        self.done = False
        self.last_action = np.zeros(self.n_agents, dtype=np.int64)
        self.has_acted = False
        return self.observations()

    def observations(self) -> list[np.ndarray]:
        out = []
        for i in range(self.n_agents):
            vec = np.zeros(self.obs_dim)
            vec[0] = float(self.has_acted)
            if self.has_acted:
                own = self.last_action[i]
                other = self.last_action[1 - i]
                vec[1 + own] = 1.0
                vec[1 + self.n_actions + other] = 1.0
            out.append(vec)
        return out

    def global_state(self) -> np.ndarray:
        state = np.zeros(self.state_dim)
        if self.has_acted:
            for i in range(self.n_agents):
                state[i * self.n_actions + self.last_action[i]] = 1.0
        return state

    def visibility(self) -> VisibilityGraph:
        everyone = set(range(self.n_agents))
        return VisibilityGraph([set(everyone) for _ in range(self.n_agents)])

    def step(self, actions):
        if self.done:
            raise EnvError("step() called on a finished episode")
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n_agents,):
            raise ConfigError(
                f"joint action length {actions.shape} != agent count {self.n_agents}")
        if np.any(actions < 0) or np.any(actions >= self.n_actions):
            raise ConfigError(f"matrix game actions must lie in [0, {self.n_actions})")
        reward = float(self.payoff[actions[0], actions[1]])
        self.last_action = actions.copy()
        self.has_acted = True
        self.step_count = 1
        self.done = True
        info = {"joint_action": tuple(int(a) for a in actions),
                "optimal": reward == float(self.payoff.max())}
        return self.observations(), reward, True, info
