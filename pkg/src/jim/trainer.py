"""Episode rollout, replay and the full training loop.

One gradient step is taken per collected episode over a batch of whole
episodes replayed through the recurrent networks from zero hidden state.
Runs are bit-exact reproducible: every random draw comes from named
streams spawned off the run seed, and each episode stores the environment
seed it was rolled from so trajectories can be replayed.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, config_hash, parse_config, render_config
from .env import GRID_KINDS, GridEnv, MatrixGameEnv, make_env
from .io_utils import write_csv, write_json, write_jsonl
from .mixer import LossBundle
from .numeric import PROB_FLOOR, NumericError, RmsProp, softmax
from .partition import greedy_partition
from .policy import NetworkBundle, build_networks, select_discrete


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss; diagnostics are written before raising."""


@dataclass
class Schedule:
    eps_start: float = 1.0
    eps_end: float = 0.05
    anneal_steps: int = 70_000


def epsilon_at(step: int, schedule: Schedule) -> float:
    """Linear anneal from eps_start to eps_end, clamped at the end value."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    frac = min(step / schedule.anneal_steps, 1.0)
    return schedule.eps_start + (schedule.eps_end - schedule.eps_start) * frac


@dataclass
class EpisodeRecord:
    obs: np.ndarray          # [T+1, n_agents, obs_dim]
    state: np.ndarray        # [T+1, state_dim]
    actions: np.ndarray      # [T, n_agents]
    rewards: np.ndarray      # [T]
    z_agent: np.ndarray      # [T, n_agents]; -1 when run without intentions
    teams: list              # per step: list of (commander, members, z)
    observer_z: np.ndarray   # [T, n_agents]; -1 when not collected
    env_seed: int
    length: int
    episode_return: float
    success: float           # prey caught fraction / optimal-payoff flag
    n_agents: int


class ReplayBuffer:
    """Ring of whole episodes; sampling is uniform without replacement."""

    def __init__(self, max_episodes: int):
        self.max_episodes = max_episodes
        self._episodes: list[EpisodeRecord] = []
        self._next = 0

    def __len__(self):
        return len(self._episodes)

    def add(self, ep: EpisodeRecord):
        if len(self._episodes) < self.max_episodes:
            self._episodes.append(ep)
        else:
            self._episodes[self._next] = ep
            self._next = (self._next + 1) % self.max_episodes

    def ready(self, batch_size: int) -> bool:
        return len(self._episodes) >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[EpisodeRecord]:
        if not self.ready(batch_size):
            raise ValueError("buffer holds fewer episodes than the batch size")
        idx = rng.choice(len(self._episodes), size=batch_size, replace=False)
        return [self._episodes[i] for i in idx]


def use_intentions(mode: str) -> bool:
    return mode in ("full_method", "no_weighting")


def play_episode(nets: NetworkBundle, cfg: ExperimentConfig, env, env_seed: int,
                 epsilon_fn, rng_explore: np.random.Generator,
                 rng_partition: np.random.Generator, *, mode: str | None = None,
                 step_offset: int = 0, collect_observer: bool = False,
                 forced_z: int | None = None, greedy: bool = False,
                 dump: list | None = None,
                 episode_index: int = 0) -> EpisodeRecord:
    """Roll one episode; returns the full transition record.

    ``epsilon_fn(global_step)`` supplies exploration; pass ``lambda s: 0.0``
    for greedy evaluation. ``forced_z`` pins every team's intention (the
    zero-intention ablation). When ``dump`` is a list, one JSONL-ready dict
    per step is appended to it.
    """
    mode = mode or cfg.mode
    with_int = use_intentions(mode)
    n = env.n_agents
    ids = np.arange(n)
    obs = env.reset(env_seed)
    obs_hist = [np.stack(obs)]
    state_hist = [env.global_state()]
    actions_hist, rewards_hist, teams_hist = [], [], []
    z_hist, observer_hist = [], []
    hidden = nets.behavior.init_hidden(n)
    is_grid = isinstance(env, GridEnv)
    caught = 0
    t = 0
    done = False
    while not done:
        eps = epsilon_fn(step_offset + t)
        obs_rows = obs_hist[-1]
        z_per_agent = np.full(n, -1, dtype=np.int64)
        teams_step = []
        observer_step = np.full(n, -1, dtype=np.int64)
        if with_int:
            part = greedy_partition(env.visibility(), rng_partition)
            qh = nets.intention.q_values(obs_rows)
            if collect_observer:
                observer_step = qh.argmax(axis=1).astype(np.int64)
            for team in part.teams:
                if forced_z is not None:
                    z = int(forced_z)
                elif greedy:
                    z = int(np.argmax(qh[team.commander]))
                elif cfg.high_level_sampling == "boltzmann":
                    probs = softmax(qh[team.commander] / cfg.temperature)
                    z = int(rng_explore.choice(nets.n_intentions, p=probs))
                else:
                    z = select_discrete(qh[team.commander], eps, rng_explore)
                members = tuple(sorted(team.members))
                teams_step.append((team.commander, members, z))
                for k in members:
                    z_per_agent[k] = z
        x = nets.behavior.build_input(obs_rows, z_per_agent, ids)
        q, hidden, _ = nets.behavior.step(x, hidden, need_cache=False)
        if with_int and teams_step:
            # team-synchronized exploration: each agent flips its own
            # epsilon coin (uniform marginal), but exploring teammates share
            # one action draw per step, so exploratory joint actions are
            # coordinated the way the shared intention says they should be
            actions = np.empty(n, dtype=np.int64)
            for (_, members, _z) in teams_step:
                shared = int(rng_explore.integers(env.n_actions))
                for k in members:
                    if eps > 0.0 and rng_explore.random() < eps:
                        actions[k] = shared
                    else:
                        actions[k] = int(np.argmax(q[k]))
        else:
            actions = np.array([select_discrete(q[i], eps, rng_explore)
                                for i in range(n)], dtype=np.int64)
        obs, reward, done, info = env.step(actions)
        if is_grid:
            caught += len(info["catches"]) + len(info["kills"])
        obs_hist.append(np.stack(obs))
        state_hist.append(env.global_state())
        actions_hist.append(actions)
        rewards_hist.append(reward)
        teams_hist.append(teams_step)
        z_hist.append(z_per_agent)
        observer_hist.append(observer_step)
        if dump is not None:
            rec = {
                "episode": episode_index,
                "step": t,
                "reward": reward,
                "actions": [int(a) for a in actions],
                "teams": [{"commander": int(c), "members": [int(m) for m in ms],
                           "z": int(z),
                           "member_greedy": [int(observer_step[m]) for m in ms]}
                          for (c, ms, z) in teams_step],
            }
            if is_grid:
                rec["agents"] = [[int(x_), int(y_)] for (x_, y_) in env.agent_pos]
                rec["prey"] = [[int(x_), int(y_)] for k, (x_, y_)
                               in enumerate(env.prey_pos) if env.prey_alive[k]]
            dump.append(rec)
        t += 1

    if is_grid:
        success = caught / max(env.config.n_enemies, 1)
    else:
        success = float(info.get("optimal", False))
    return EpisodeRecord(
        obs=np.stack(obs_hist),
        state=np.stack(state_hist),
        actions=np.stack(actions_hist),
        rewards=np.array(rewards_hist),
        z_agent=np.stack(z_hist),
        teams=teams_hist,
        observer_z=np.stack(observer_hist),
        env_seed=env_seed,
        length=t,
        episode_return=float(np.sum(rewards_hist)),
        success=success,
        n_agents=n,
    )


def replay_episode_rewards(cfg: ExperimentConfig, ep: EpisodeRecord) -> np.ndarray:
    """Re-run a stored episode's actions from its seed; returns the rewards."""
    env = make_env(cfg.env)
    env.reset(ep.env_seed)
    rewards = []
    for t in range(ep.length):
        _, r, done, _ = env.step(ep.actions[t])
        rewards.append(r)
        if done:
            break
    return np.array(rewards)


# -- training step -----------------------------------------------------------


def _group_starts(gid: np.ndarray) -> np.ndarray:
    return np.nonzero(np.diff(gid, prepend=gid[0] - 1))[0]


def train_step(nets: NetworkBundle, episodes: list[EpisodeRecord], opt: RmsProp,
               cfg: ExperimentConfig, mode: str | None = None) -> LossBundle:
    """One RMSprop update over the whole parameter set from a batch of
    episodes, replayed through the recurrent networks from zero hidden."""
    bundle = compute_losses(nets, episodes, cfg, mode=mode, with_grads=True)
    total = bundle.total(cfg.lambda_aux, cfg.lambda_div)
    if not np.isfinite(total):
        raise TrainingAbort(
            f"non-finite loss {bundle} on episodes seeded "
            f"{[ep.env_seed for ep in episodes]}")
    opt.step()
    return bundle


def compute_losses(nets: NetworkBundle, episodes: list[EpisodeRecord],
                   cfg: ExperimentConfig, mode: str | None = None,
                   with_grads: bool = True) -> LossBundle:
    """Replay a batch and assemble every loss; optionally run the backward
    pass, accumulating gradients without touching the optimizer.

    Alphas and the intrinsic shaping term are treated as constants during
    backward (their defining role is gradient scaling, not a gradient
    path); the policy distribution p inside the KL losses reaches the
    intention parameters only when ``cfg.kl_to_intention`` is set.
    """
    mode = mode or cfg.mode
    with_int = use_intentions(mode)
    b_size = len(episodes)
    n = nets.n_agents
    obs_dim, a_dim, z_dim = nets.obs_dim, nets.n_actions, nets.n_intentions
    t_max = max(ep.length for ep in episodes)

    obs = np.zeros((b_size, t_max + 1, n, obs_dim))
    state = np.zeros((b_size, t_max + 1, nets.state_dim))
    act = np.zeros((b_size, t_max, n), dtype=np.int64)
    rew = np.zeros((b_size, t_max))
    mask = np.zeros((b_size, t_max))
    term = np.zeros((b_size, t_max))
    zpad = np.full((b_size, t_max, n), -1, dtype=np.int64)
    for b, ep in enumerate(episodes):
        ln = ep.length
        obs[b, :ln + 1] = ep.obs
        state[b, :ln + 1] = ep.state
        act[b, :ln] = ep.actions
        rew[b, :ln] = ep.rewards
        mask[b, :ln] = 1.0
        term[b, ln - 1] = 1.0
        zpad[b, :ln] = ep.z_agent
    n_valid = float(mask.sum())
    ids_flat = np.tile(np.arange(n), b_size)

    # behavior replay, online with caches and target without
    hidden = nets.behavior.init_hidden(b_size * n)
    t_hidden = nets.target_behavior.init_hidden(b_size * n)
    q_all = np.zeros((b_size, t_max, n, a_dim))
    tq_max = np.zeros((b_size, t_max, n))
    caches = []
    for t in range(t_max):
        x = nets.behavior.build_input(obs[:, t].reshape(-1, obs_dim),
                                      zpad[:, t].reshape(-1), ids_flat)
        q, hidden, cache = nets.behavior.step(x, hidden, need_cache=with_grads)
        caches.append(cache)
        q_all[:, t] = q.reshape(b_size, n, a_dim)
        tq, t_hidden, _ = nets.target_behavior.step(x, t_hidden, need_cache=False)
        tq_max[:, t] = tq.reshape(b_size, n, a_dim).max(axis=2)

    chosen_q = np.take_along_axis(q_all, act[..., None], axis=3)[..., 0]
    q_tot, mix_cache = nets.mixer.forward(chosen_q.reshape(-1, n),
                                          state[:, :t_max].reshape(b_size * t_max, -1))
    q_tot = q_tot.reshape(b_size, t_max)
    tq_next = np.zeros((b_size, t_max, n))
    tq_next[:, :-1] = tq_max[:, 1:]
    tq_tot, _ = nets.target_mixer.forward(tq_next.reshape(-1, n),
                                          state[:, 1:].reshape(b_size * t_max, -1))
    tq_tot = tq_tot.reshape(b_size, t_max)

    bundle = LossBundle()

    # high level rows: one per (episode, step, team), grouped by step
    if with_int:
        rb, rt, rc, rz, sizes = [], [], [], [], []
        mem_row, mem_agent = [], []
        for b, ep in enumerate(episodes):
            for t, teams_step in enumerate(ep.teams):
                for (commander, members, z) in teams_step:
                    row = len(rb)
                    rb.append(b)
                    rt.append(t)
                    rc.append(commander)
                    rz.append(z)
                    sizes.append(len(members))
                    for k in members:
                        mem_row.append(row)
                        mem_agent.append(k)
        rb = np.array(rb)
        rt = np.array(rt)
        rc = np.array(rc)
        rz = np.array(rz)
        sizes = np.array(sizes, dtype=np.float64)
        mem_row = np.array(mem_row)
        mem_agent = np.array(mem_agent)
        n_rows = rb.size
        rows_idx = np.arange(n_rows)

        com_obs = obs[rb, rt, rc]
        com_obs_next = obs[rb, rt + 1, rc]
        qh, qh_caches = nets.intention.forward(com_obs)
        tqh, _ = nets.target_intention.forward(com_obs_next)
        p_rows = softmax(qh, cfg.temperature)
        plogits, post_caches = nets.posterior.forward(
            nets.posterior.pair_input(com_obs, com_obs_next))
        q_rows = softmax(plogits)
        mem_obs_next = obs[rb[mem_row], rt[mem_row] + 1, mem_agent]
        mlogits, mem_caches = nets.posterior.forward(
            nets.posterior.pair_input(com_obs[mem_row], mem_obs_next))
        qm_rows = softmax(mlogits)

        mi_rows = np.maximum(
            np.log(np.maximum(q_rows[rows_idx, rz], PROB_FLOOR))
            - np.log(np.maximum(p_rows[rows_idx, rz], PROB_FLOOR)),
            cfg.mi_floor)
        gid = rb * t_max + rt
        starts = _group_starts(gid)
        counts = np.diff(starts, append=n_rows)
        mi_sums = np.add.reduceat(mi_rows, starts)
        if mode == "no_weighting":
            alphas = np.ones(n_rows)
        else:
            alphas = sizes * mi_rows / np.repeat(mi_sums, counts)

        qj_rows = qh[rows_idx, rz]
        q_tot_h = np.zeros((b_size, t_max))
        np.add.at(q_tot_h, (rb, rt), alphas * qj_rows)
        next_best = np.zeros((b_size, t_max))
        np.add.at(next_best, (rb, rt), alphas * tqh.max(axis=1))
        y_h = rew + cfg.gamma * (1.0 - term) * next_best
        delta_h = (q_tot_h - y_h) * mask
        bundle.td_high = float((delta_h ** 2).sum() / n_valid)

        # per-step mean MI becomes the intrinsic shaping term of the low level
        mi_mean_step = np.zeros((b_size, t_max))
        np.add.at(mi_mean_step, (rb, rt), mi_rows)
        team_counts = np.zeros((b_size, t_max))
        np.add.at(team_counts, (rb, rt), 1.0)
        mi_mean_step /= np.maximum(team_counts, 1.0)
        r_low = rew + cfg.beta_intrinsic * mi_mean_step
        bundle.intrinsic_mean = float(
            (cfg.beta_intrinsic * mi_mean_step * mask).sum() / n_valid)

        l_i_rows = _batched_kl(p_rows, q_rows)
        l_a_members = _batched_kl(p_rows[mem_row], qm_rows)
        mem_starts = _group_starts(mem_row)
        l_a_rows = np.add.reduceat(l_a_members, mem_starts) / sizes
        p_hat, q_hat = _masked_renorm(p_rows, rz), _masked_renorm(q_rows, rz)
        l_d_rows = -_batched_kl(p_hat, q_hat)
        bundle.l_i = float(l_i_rows.sum() / n_valid)
        bundle.l_a = float(l_a_rows.sum() / n_valid)
        bundle.l_d = float(l_d_rows.sum() / n_valid)
        bundle.mean_alpha = float(alphas.mean())
        bundle.mean_mi = float(mi_rows.mean())
        ce_i = -np.log(np.maximum(q_rows[rows_idx, rz], PROB_FLOOR))
        ce_a = -np.log(np.maximum(qm_rows[np.arange(mem_row.size), rz[mem_row]],
                                  PROB_FLOOR))
        bundle.sampled_i = float(ce_i.sum() / n_valid)
        bundle.sampled_a = float(
            (np.add.reduceat(ce_a, mem_starts) / sizes).sum() / n_valid)
    else:
        r_low = rew

    y_low = r_low + cfg.gamma * (1.0 - term) * tq_tot
    delta_low = (q_tot - y_low) * mask
    bundle.td_low = float((delta_low ** 2).sum() / n_valid)

    if not with_grads:
        return bundle

    # ---- backward ----
    nets.zero_grads()
    d_qtot = (2.0 / n_valid) * delta_low
    d_agent = nets.mixer.backward(mix_cache, d_qtot.reshape(-1))
    d_agent = d_agent.reshape(b_size, t_max, n)
    dq_all = np.zeros_like(q_all)
    np.put_along_axis(dq_all, act[..., None], d_agent[..., None], axis=3)
    dh = np.zeros((b_size * n, nets.behavior.hidden))
    for t in reversed(range(t_max)):
        dh = nets.behavior.backward_step(caches[t], dq_all[:, t].reshape(-1, a_dim), dh)

    if with_int:
        d_qh = np.zeros_like(qh)
        d_qh[rows_idx, rz] = (2.0 / n_valid) * delta_h[rb, rt] * alphas
        if cfg.kl_to_intention:
            d_p = _batched_kl_grad_plogits(p_rows, q_rows, cfg.temperature)
            mem_p = _batched_kl_grad_plogits(p_rows[mem_row], qm_rows, cfg.temperature)
            d_p_aux = np.zeros_like(d_p)
            np.add.at(d_p_aux, mem_row, mem_p)
            d_div = _batched_div_grad_plogits(p_rows, p_hat, q_hat, rz,
                                              cfg.temperature)
            d_qh += (d_p + cfg.lambda_aux * d_p_aux / sizes[:, None]
                     + cfg.lambda_div * d_div) / n_valid
        nets.intention.backward(qh_caches, d_qh)

        # posterior gradient: the per-sample (executed-intention) form of the
        # variational bound, i.e. cross-entropy at the chosen z, plus the
        # diversity term. The soft-target KL(p || q) gradient would let the
        # posterior ignore the next observation entirely (its pointwise
        # minimizer is q = p for every o'), collapsing every MI estimate;
        # the logged l_I / l_A values remain the KL diagnostics.
        z_onehot_rows = np.zeros_like(q_rows)
        z_onehot_rows[rows_idx, rz] = 1.0
        d_post = (q_rows - z_onehot_rows) + cfg.lambda_div * (p_hat - q_hat)
        nets.posterior.backward(post_caches, d_post / n_valid)
        d_mem = (cfg.lambda_aux / n_valid) * (qm_rows - z_onehot_rows[mem_row]) \
            / sizes[mem_row][:, None]
        nets.posterior.backward(mem_caches, d_mem)

    return bundle


def _batched_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    logq = np.log(np.maximum(q, PROB_FLOOR))
    logp = np.log(np.where(p > 0.0, p, 1.0))
    return np.maximum((p * (logp - logq)).sum(axis=1), 0.0)


def _masked_renorm(rows: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    out = rows.copy()
    out[np.arange(rows.shape[0]), chosen] = 0.0
    out /= np.maximum(out.sum(axis=1, keepdims=True), PROB_FLOOR)
    return out


def _batched_kl_grad_plogits(p: np.ndarray, q: np.ndarray, temperature: float) -> np.ndarray:
    ratio = np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))
    kl = (p * ratio).sum(axis=1, keepdims=True)
    return p * (ratio - kl) / temperature


def _batched_div_grad_plogits(p: np.ndarray, p_hat: np.ndarray, q_hat: np.ndarray,
                              chosen: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise diversity_grad_plogits given pre-masked renormalized p_hat/q_hat
    (zero at the chosen intention)."""
    rows = np.arange(p.shape[0])
    keep = np.ones_like(p, dtype=bool)
    keep[rows, chosen] = False
    s = np.maximum((p * keep).sum(axis=1, keepdims=True), PROB_FLOOR)
    ratio = np.where(keep,
                     np.log(np.maximum(p_hat, PROB_FLOOR))
                     - np.log(np.maximum(q_hat, PROB_FLOOR)),
                     0.0)
    kl = (p_hat * ratio).sum(axis=1, keepdims=True)
    g = np.where(keep, (kl - ratio) / s, 0.0)
    gbar = (p * g).sum(axis=1, keepdims=True)
    return p * (g - gbar) / temperature


def sync_targets(nets: NetworkBundle, episodes_done: int,
                 every_episodes: int = 200) -> bool:
    """Hard target copy on the episode cadence; returns True when synced."""
    if episodes_done % every_episodes == 0:
        nets.sync_targets()
        return True
    return False


# -- intention statistics window ---------------------------------------------


class IntentionWindow:
    """Accumulates selection counts, observer counts, continuity run lengths
    and commander agreement over the training episodes between eval points."""

    def __init__(self, n_intentions: int):
        self.n_intentions = n_intentions
        self.reset()

    def reset(self):
        self.selection = np.zeros(self.n_intentions)
        self.observer = np.zeros(self.n_intentions)
        self.run_lengths: list[int] = []
        self.agree_hits = 0
        self.agree_total = 0

    def accumulate(self, ep: EpisodeRecord):
        for t, teams_step in enumerate(ep.teams):
            for (commander, members, z) in teams_step:
                self.selection[z] += 1
                for k in members:
                    ob = ep.observer_z[t, k]
                    if ob >= 0:
                        self.observer[ob] += 1
                        self.agree_total += 1
                        if ob == z:
                            self.agree_hits += 1
        for i in range(ep.n_agents):
            zs = ep.z_agent[:, i]
            run = 0
            prev = None
            for z in zs:
                if z < 0:
                    continue
                if prev is not None and z == prev:
                    run += 1
                else:
                    if run:
                        self.run_lengths.append(run)
                    run = 1
                prev = z
            if run:
                self.run_lengths.append(run)

    def stats(self) -> dict:
        sel_total = self.selection.sum()
        obs_total = self.observer.sum()
        if sel_total > 0 and obs_total > 0:
            tv = 0.5 * float(np.abs(self.selection / sel_total
                                    - self.observer / obs_total).sum())
        else:
            tv = 0.0
        return {
            "continuity_mean": float(np.mean(self.run_lengths)) if self.run_lengths else 0.0,
            "tv_select_observer": tv,
            "agreement": (self.agree_hits / self.agree_total
                          if self.agree_total else 0.0),
            "selection_counts": self.selection.copy(),
            "observer_counts": self.observer.copy(),
        }


# -- training loop ------------------------------------------------------------


LOG_COLUMNS = ("step", "episodes", "return_mean", "success_rate", "td_low",
               "td_high", "l_I", "l_A", "l_D", "total", "mean_alpha", "mean_mi",
               "intrinsic_mean", "epsilon", "continuity_mean",
               "tv_select_observer", "agreement")


@dataclass
class TrainingLog:
    seed: int
    mode: str
    cfg_hash: str
    rows: list = field(default_factory=list)
    final_checkpoint: str = ""
    env_steps: int = 0
    episodes: int = 0
    wall_time_s: float = 0.0

    def add_row(self, **values):
        self.rows.append([values.get(c, 0.0) for c in LOG_COLUMNS])

    def column(self, name: str) -> list:
        i = LOG_COLUMNS.index(name)
        return [row[i] for row in self.rows]

    @property
    def final_return(self) -> float:
        return self.column("return_mean")[-1] if self.rows else 0.0

    def write(self, path):
        write_csv(path, LOG_COLUMNS, self.rows, seed=self.seed, cfg_hash=self.cfg_hash,
                  extra_comment=f"mode={self.mode}")


def greedy_eval(nets: NetworkBundle, cfg: ExperimentConfig, episodes: int,
                rng_eval: np.random.Generator, *, mode: str | None = None,
                forced_z: int | None = None, n_agents: int | None = None,
                dump: list | None = None) -> dict:
    """Greedy-policy evaluation on fresh environments; never trains."""
    mode = mode or cfg.mode
    if n_agents is not None and cfg.env.kind in GRID_KINDS:
        env = GridEnv(cfg.env, n_agents=n_agents)
    else:
        env = make_env(cfg.env)
    returns, successes = [], []
    for e in range(episodes):
        seed = int(rng_eval.integers(2 ** 63))
        ep = play_episode(nets, cfg, env, seed, lambda s: 0.0,
                          rng_eval, rng_eval, mode=mode, forced_z=forced_z,
                          greedy=True, collect_observer=use_intentions(mode),
                          dump=dump, episode_index=e)
        returns.append(ep.episode_return / env.n_agents)
        successes.append(ep.success)
    return {
        "episodes": episodes,
        "mean_return_per_agent": float(np.mean(returns)),
        "success_rate": float(np.mean(successes)),
        "returns": returns,
    }


def run_training(cfg: ExperimentConfig, seed: int, out_dir: str) -> TrainingLog:
    """Train one seed; writes training_log.csv, losses.csv, summary.json,
    checkpoints and optional final-eval trajectory dumps under ``out_dir``."""
    cfg = cfg.resolved()
    os.makedirs(out_dir, exist_ok=True)
    started = time.time()
    cfg_hash = config_hash(cfg)
    schedule = Schedule(cfg.eps_start, cfg.eps_end, cfg.eps_anneal_steps)
    children = np.random.SeedSequence(seed).spawn(6)
    rng_env = np.random.default_rng(children[0])
    rng_explore = np.random.default_rng(children[1])
    rng_partition = np.random.default_rng(children[2])
    rng_init = np.random.default_rng(children[3])
    rng_sample = np.random.default_rng(children[4])
    rng_eval = np.random.default_rng(children[5])

    nets = build_networks(cfg, rng_init)
    if use_intentions(cfg.mode):
        trainable = nets.parameters()
    else:
        trainable = nets.behavior_parameters()
    opt = RmsProp(trainable, lr=cfg.lr, decay=cfg.rms_decay,
                  eps_stability=cfg.rms_eps)
    buffer = ReplayBuffer(cfg.buffer_episodes)
    env = make_env(cfg.env)
    window = IntentionWindow(cfg.n_intentions)
    log = TrainingLog(seed=seed, mode=cfg.mode, cfg_hash=cfg_hash)
    loss_rows = []
    window_bundles: list[LossBundle] = []

    env_steps = 0
    episodes_done = 0
    next_eval = cfg.eval_interval

    def emit_row():
        metrics = greedy_eval(nets, cfg, cfg.eval_episodes, rng_eval)
        stats = window.stats()
        agg = {}
        if window_bundles:
            agg = {
                "td_low": float(np.mean([b.td_low for b in window_bundles])),
                "td_high": float(np.mean([b.td_high for b in window_bundles])),
                "l_I": float(np.mean([b.l_i for b in window_bundles])),
                "l_A": float(np.mean([b.l_a for b in window_bundles])),
                "l_D": float(np.mean([b.l_d for b in window_bundles])),
                "total": float(np.mean([b.total(cfg.lambda_aux, cfg.lambda_div)
                                        for b in window_bundles])),
                "mean_alpha": float(np.mean([b.mean_alpha for b in window_bundles])),
                "mean_mi": float(np.mean([b.mean_mi for b in window_bundles])),
                "intrinsic_mean": float(np.mean([b.intrinsic_mean
                                                 for b in window_bundles])),
            }
        log.add_row(step=env_steps, episodes=episodes_done,
                    return_mean=metrics["mean_return_per_agent"],
                    success_rate=metrics["success_rate"],
                    epsilon=epsilon_at(env_steps, schedule),
                    continuity_mean=stats["continuity_mean"],
                    tv_select_observer=stats["tv_select_observer"],
                    agreement=stats["agreement"], **agg)
        window.reset()
        window_bundles.clear()

    try:
        while env_steps < cfg.total_env_steps:
            ep_seed = int(rng_env.integers(2 ** 63))
            ep = play_episode(nets, cfg, env, ep_seed,
                              lambda s: epsilon_at(s, schedule), rng_explore,
                              rng_partition, step_offset=env_steps,
                              collect_observer=use_intentions(cfg.mode))
            env_steps += ep.length
            episodes_done += 1
            buffer.add(ep)
            window.accumulate(ep)
            if buffer.ready(cfg.batch_size):
                batch = buffer.sample(cfg.batch_size, rng_sample)
                bundle = train_step(nets, batch, opt, cfg)
                loss_rows.append(bundle.csv_row(env_steps, cfg.lambda_aux,
                                                cfg.lambda_div))
                window_bundles.append(bundle)
            sync_targets(nets, episodes_done, cfg.target_sync_episodes)
            if (cfg.checkpoint_interval
                    and episodes_done % cfg.checkpoint_interval == 0):
                nets.save(os.path.join(out_dir, f"checkpoint_ep{episodes_done}.ckpt"),
                          meta={"seed": str(seed), "config": cfg_hash,
                                "episodes": str(episodes_done)})
            if env_steps >= next_eval:
                emit_row()
                while next_eval <= env_steps:
                    next_eval += cfg.eval_interval
    except TrainingAbort as abort:
        write_json(os.path.join(out_dir, "abort_diagnostics.json"),
                   {"error": str(abort), "env_steps": env_steps,
                    "episodes": episodes_done})
        raise

    if not log.rows or log.column("step")[-1] < env_steps:
        emit_row()

    log.env_steps = env_steps
    log.episodes = episodes_done
    log.wall_time_s = time.time() - started
    ckpt_path = os.path.join(out_dir, "checkpoint_final.ckpt")
    nets.save(ckpt_path, meta={"seed": str(seed), "config": cfg_hash,
                               "episodes": str(episodes_done)})
    log.final_checkpoint = ckpt_path
    log.write(os.path.join(out_dir, "training_log.csv"))
    write_csv(os.path.join(out_dir, "losses.csv"), LossBundle.CSV_COLUMNS,
              loss_rows, seed=seed, cfg_hash=cfg_hash)
    if cfg.dump_final_eval:
        dump: list = []
        greedy_eval(nets, cfg, cfg.eval_episodes, np.random.default_rng(seed + 1),
                    dump=dump)
        write_jsonl(os.path.join(out_dir, "dumps", "final_eval.jsonl"), dump,
                    header={"seed": seed, "config": cfg_hash, "mode": cfg.mode,
                            "n_intentions": cfg.n_intentions,
                            "n_agents": cfg.env.n_agents})
    write_json(os.path.join(out_dir, "summary.json"), {
        "seed": seed,
        "mode": cfg.mode,
        "config": cfg_hash,
        "env_steps": env_steps,
        "episodes": episodes_done,
        "final_return_mean": log.final_return,
        "final_success_rate": log.column("success_rate")[-1],
        "wall_time_s": round(log.wall_time_s, 3),
        "checkpoint": ckpt_path,
    })
    with open(os.path.join(out_dir, "config.cfg"), "w", encoding="utf-8") as f:
        f.write(render_config(cfg))
    return log


def _run_one_seed(args):
    cfg_text, seed, out_dir = args
    cfg = parse_config(cfg_text)
    log = run_training(cfg, seed, out_dir)
    return seed, log.final_return, log.column("success_rate")[-1]


def run_seeds(cfg: ExperimentConfig, out_root: str, jobs: int = 1) -> dict:
    """Fan a config out over its seed list; one subdirectory per seed plus an
    aggregate summary (mean and range, the five-seed reporting convention)."""
    cfg = cfg.resolved()
    os.makedirs(out_root, exist_ok=True)
    with open(os.path.join(out_root, "config.cfg"), "w", encoding="utf-8") as f:
        f.write(render_config(cfg))
    tasks = [(render_config(cfg), seed, os.path.join(out_root, f"seed_{seed}"))
             for seed in cfg.seeds]
    results = []
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one_seed, tasks))
    else:
        results = [_run_one_seed(task) for task in tasks]
    returns = [r[1] for r in results]
    successes = [r[2] for r in results]
    aggregate = {
        "config": config_hash(cfg),
        "mode": cfg.mode,
        "seeds": list(cfg.seeds),
        "final_return_mean": float(np.mean(returns)),
        "final_return_range": [float(np.min(returns)), float(np.max(returns))],
        "final_success_mean": float(np.mean(successes)),
        "final_success_range": [float(np.min(successes)), float(np.max(successes))],
        "per_seed": {str(s): {"final_return_mean": r, "final_success_rate": w}
                     for s, r, w in results},
    }
    write_json(os.path.join(out_root, "summary_aggregate.json"), aggregate)
    return aggregate
