"""Loss machinery: monotonic mixing, MI-weighted value decomposition and
the three KL losses tying intentions to observed local-state changes.

The low level mixes per-agent action values through state-conditioned
nonnegative weights (absolute-valued hypernetwork outputs). The high level
mixes per-team intention values with scalar weights alpha_j derived from
each team's variational mutual-information estimate; alphas are treated as
constants, so they scale gradients exactly like per-sample learning rates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import (
    DenseLayer,
    DimensionError,
    ParameterError,
    PROB_FLOOR,
    categorical_kl,
)

MI_FLOOR = 1e-6


class MonotonicMixer:
    """Two-layer mix of per-agent utilities, weights from |hypernet(state)|.

    q_tot = sum_e (sum_i q_i |W1|_ie + b1_e) |w2|_e + v. The hidden mixing
    layer is linear so identity weights reduce exactly to a plain utility
    sum; expressiveness comes from the state-conditioned weights, and every
    partial derivative w.r.t. an agent utility stays nonnegative.
    """

    def __init__(self, state_dim: int, n_agents: int,
                 rng: np.random.Generator | None = None,
                 embed: int = 32, name: str = "mixer"):
        self.state_dim = state_dim
        self.n_agents = n_agents
        self.embed = embed
        self.hyper_w1 = DenseLayer(f"{name}.hyper_w1", state_dim, n_agents * embed,
                                   "identity", rng)
        self.hyper_b1 = DenseLayer(f"{name}.hyper_b1", state_dim, embed,
                                   "identity", rng)
        self.hyper_w2 = DenseLayer(f"{name}.hyper_w2", state_dim, embed,
                                   "identity", rng)
        self.hyper_v = DenseLayer(f"{name}.hyper_v", state_dim, 1, "identity", rng)

    def parameters(self):
        return (self.hyper_w1.parameters() + self.hyper_b1.parameters()
                + self.hyper_w2.parameters() + self.hyper_v.parameters())

    def forward(self, agent_qs, state):
        """agent_qs [B, n_agents], state [B, state_dim] -> (q_tot [B], cache)."""
        q = np.atleast_2d(np.asarray(agent_qs, dtype=np.float64))
        s = np.atleast_2d(np.asarray(state, dtype=np.float64))
        if q.shape[-1] != self.n_agents:
            raise DimensionError(
                f"mixer got {q.shape[-1]} utilities for {self.n_agents} agents")
        raw_w1, c_w1 = self.hyper_w1.forward(s)
        b1, c_b1 = self.hyper_b1.forward(s)
        raw_w2, c_w2 = self.hyper_w2.forward(s)
        v, c_v = self.hyper_v.forward(s)
        w1 = np.abs(raw_w1).reshape(-1, self.n_agents, self.embed)
        w2 = np.abs(raw_w2)
        hid = np.einsum("bi,bie->be", q, w1) + b1
        q_tot = (hid * w2).sum(axis=1) + v[:, 0]
        cache = (q, raw_w1, w1, hid, raw_w2, w2, c_w1, c_b1, c_w2, c_v)
        return q_tot, cache

    def backward(self, cache, dq_tot):
        """Accumulate hypernet grads; return d(agent_qs) [B, n_agents]."""
        q, raw_w1, w1, hid, raw_w2, w2, c_w1, c_b1, c_w2, c_v = cache
        g = np.asarray(dq_tot, dtype=np.float64).reshape(-1, 1)
        self.hyper_v.backward(c_v, g)
        dhid = g * w2
        self.hyper_w2.backward(c_w2, g * hid * np.sign(raw_w2))
        self.hyper_b1.backward(c_b1, dhid)
        dw1 = np.einsum("bi,be->bie", q, dhid)
        self.hyper_w1.backward(
            c_w1, (dw1 * np.sign(raw_w1).reshape(dw1.shape)).reshape(dw1.shape[0], -1))
        return np.einsum("bie,be->bi", w1, dhid)


def qmix_mix(mixer: MonotonicMixer, agent_qs, state) -> float:
    """Value-only convenience wrapper for a single sample."""
    q_tot, _ = mixer.forward(agent_qs, state)
    return float(q_tot[0])


def mi_estimate(p, q, chosen_z: int, mi_floor: float = MI_FLOOR) -> float:
    """Per-sample variational MI: ln q(z) - ln p(z), clamped below at mi_floor."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    val = (np.log(max(q[chosen_z], PROB_FLOOR))
           - np.log(max(p[chosen_z], PROB_FLOOR)))
    return float(max(val, mi_floor))


def alpha_weights(mi, team_sizes) -> np.ndarray:
    """alpha_j = K_j * I_j / sum_m I_m over this timestep's teams.

    Alphas are plain floats: no gradient flows through them, matching their
    role as per-team gradient scales.
    """
    mi = np.asarray(mi, dtype=np.float64)
    sizes = np.asarray(team_sizes, dtype=np.float64)
    if mi.size == 0:
        raise ParameterError("alpha_weights needs at least one team")
    if mi.shape != sizes.shape:
        raise DimensionError("one MI estimate per team required")
    return sizes * mi / mi.sum()


def weighted_vdn_mix(team_qs, alphas) -> float:
    """Dot product of per-team values with their alpha weights."""
    q = np.asarray(team_qs, dtype=np.float64)
    a = np.asarray(alphas, dtype=np.float64)
    if q.shape != a.shape:
        raise DimensionError("team value / alpha length mismatch")
    return float(q @ a)


# -- KL losses -------------------------------------------------------------
#
# p is the Boltzmann policy distribution over intentions, q the posterior.
# Each loss comes with the gradient of its value w.r.t. the posterior
# LOGITS (softmax pre-activations), which is what the posterior backward
# consumes; d KL(p || softmax(l)) / d l = q - p.


def alignment_loss(p, q) -> float:
    """KL between the commander's intention distribution and the posterior."""
    return float(categorical_kl(p, q))


def alignment_grad_qlogits(p, q) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) - np.asarray(p, dtype=np.float64)


def auxiliary_alignment_loss(p, member_qs) -> float:
    """Mean commander-vs-member-posterior KL across the team."""
    if len(member_qs) == 0:
        raise ParameterError("auxiliary alignment needs at least one member")
    return float(np.mean([categorical_kl(p, qk) for qk in member_qs]))


def diversity_loss(p, q, chosen_z: int) -> float:
    """Negated KL between p and q restricted to the unselected intentions.

    Both distributions are masked at the chosen intention and renormalized;
    the result is always <= 0 (its minimization spreads the posterior's
    residual mass away from the policy's).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1] < 2:
        raise ParameterError("diversity loss undefined for a single intention")
    keep = np.ones(p.shape[-1], dtype=bool)
    keep[chosen_z] = False
    p_rest = p[keep]
    q_rest = q[keep]
    p_rest = p_rest / max(p_rest.sum(), PROB_FLOOR)
    q_rest = q_rest / max(q_rest.sum(), PROB_FLOOR)
    return -float(categorical_kl(p_rest, q_rest))


def diversity_grad_qlogits(p, q, chosen_z: int) -> np.ndarray:
    """d diversity_loss / d posterior logits: (p_hat - q_hat) off the chosen
    intention, exactly zero at it."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    keep = np.ones(p.shape[-1], dtype=bool)
    keep[chosen_z] = False
    p_hat = np.zeros_like(p)
    q_hat = np.zeros_like(q)
    p_hat[keep] = p[keep] / max(p[keep].sum(), PROB_FLOOR)
    q_hat[keep] = q[keep] / max(q[keep].sum(), PROB_FLOOR)
    return p_hat - q_hat


def kl_grad_plogits(p, q, temperature: float = 1.0) -> np.ndarray:
    """d KL(p || q) / d (policy logits), for the optional path that lets the
    KL losses reach the intention network through p = softmax(q_h / T)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    ratio = np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))
    kl = float((p * ratio).sum())
    return p * (ratio - kl) / temperature


def diversity_grad_plogits(p, q, chosen_z: int, temperature: float = 1.0) -> np.ndarray:
    """d diversity_loss / d (policy logits). Only the unselected entries of p
    enter the restricted KL, so the raw coordinate gradient is zero at the
    chosen intention before the softmax jacobian mixes it back in."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    keep = np.ones(p.shape[-1], dtype=bool)
    keep[chosen_z] = False
    s = max(p[keep].sum(), PROB_FLOOR)
    p_hat = p[keep] / s
    q_hat = q[keep] / max(q[keep].sum(), PROB_FLOOR)
    ratio = np.log(np.maximum(p_hat, PROB_FLOOR)) - np.log(np.maximum(q_hat, PROB_FLOOR))
    kl = float((p_hat * ratio).sum())
    g = np.zeros_like(p)
    g[keep] = (kl - ratio) / s
    return p * (g - float((p * g).sum())) / temperature


def td_targets(rewards, terminal, next_max_q, gamma: float) -> np.ndarray:
    """One-step targets y = r + gamma * (1 - terminal) * max Q'; terminal
    steps bootstrap nothing."""
    r = np.asarray(rewards, dtype=np.float64)
    t = np.asarray(terminal, dtype=np.float64)
    nq = np.asarray(next_max_q, dtype=np.float64)
    if r.shape != t.shape or r.shape != nq.shape:
        raise DimensionError("td_targets operand shapes differ")
    return r + gamma * (1.0 - t) * nq


@dataclass
class LossBundle:
    """Per-training-step loss aggregates, serialized into the metrics CSV.

    ``l_i`` / ``l_a`` are the KL diagnostics of the written objective;
    ``sampled_i`` / ``sampled_a`` are the per-sample bound forms
    (cross-entropy at the executed intention) that the posterior gradient
    actually descends.
    """

    td_low: float = 0.0
    td_high: float = 0.0
    l_i: float = 0.0
    l_a: float = 0.0
    l_d: float = 0.0
    mean_alpha: float = 0.0
    mean_mi: float = 0.0
    intrinsic_mean: float = 0.0
    sampled_i: float = 0.0
    sampled_a: float = 0.0

    def total(self, lambda_aux: float, lambda_div: float) -> float:
        return total_objective(self.td_high, self.td_low, self.l_i, self.l_a,
                               self.l_d, lambda_aux, lambda_div)

    def posterior_objective(self, lambda_aux: float, lambda_div: float) -> float:
        """What the posterior parameters actually descend."""
        return self.sampled_i + lambda_aux * self.sampled_a + lambda_div * self.l_d

    def intention_objective(self, lambda_aux: float, lambda_div: float,
                            kl_to_intention: bool) -> float:
        """What the intention parameters actually descend."""
        if kl_to_intention:
            return (self.td_high + self.l_i + lambda_aux * self.l_a
                    + lambda_div * self.l_d)
        return self.td_high

    CSV_COLUMNS = ("step", "td_low", "td_high", "l_I", "l_A", "l_D", "total",
                   "mean_alpha", "mean_mi", "intrinsic_mean")

    def csv_row(self, step: int, lambda_aux: float, lambda_div: float) -> list:
        return [step, self.td_low, self.td_high, self.l_i, self.l_a, self.l_d,
                self.total(lambda_aux, lambda_div), self.mean_alpha, self.mean_mi,
                self.intrinsic_mean]


def total_objective(td_high: float, td_low: float, l_i: float, l_a: float,
                    l_d: float, lambda_aux: float = 1.0,
                    lambda_div: float = 1.0) -> float:
    """Combined objective: both TD losses plus the weighted KL terms."""
    if lambda_aux < 0 or lambda_div < 0:
        raise ParameterError("loss multipliers must be nonnegative")
    return td_high + td_low + l_i + lambda_aux * l_a + lambda_div * l_d
