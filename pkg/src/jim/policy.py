"""The two policy levels and the variational posterior.

The high-level intention network scores every latent intention from a
commander observation; the recurrent behavior network scores environment
actions from an observation conditioned on the team intention (one-hot
concatenated at the input, next to an agent-id one-hot); the posterior
network reads an (observation, next observation) pair and produces a
distribution over intentions. All behavior parameters are shared across
agents, so the parameter count is independent of the agent count.
"""

from __future__ import annotations

import numpy as np

from . import env as env_mod
from .mixer import MonotonicMixer
from .numeric import (
    DenseLayer,
    DimensionError,
    GruCell,
    ParameterError,
    load_into_parameters,
    one_hot,
    save_parameter_blocks,
    softmax,
)


class IntentionNet:
    """Feedforward Q-network over the latent intention space: 64-64 relu
    trunk, 32 relu narrowing layer, linear head."""

    def __init__(self, obs_dim: int, n_intentions: int,
                 rng: np.random.Generator | None = None,
                 hidden: int = 64, narrow: int = 32, name: str = "intention"):
        self.obs_dim = obs_dim
        self.n_intentions = n_intentions
        self.layers = [
            DenseLayer(f"{name}.fc1", obs_dim, hidden, "relu", rng),
            DenseLayer(f"{name}.fc2", hidden, hidden, "relu", rng),
            DenseLayer(f"{name}.fc3", hidden, narrow, "relu", rng),
            DenseLayer(f"{name}.head", narrow, n_intentions, "identity", rng),
        ]

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, obs):
        x = obs
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def q_values(self, obs) -> np.ndarray:
        return self.forward(obs)[0]

    def backward(self, caches, dq):
        d = dq
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            d = layer.backward(cache, d)
        return d


class BehaviorNet:
    """Recurrent action Q-network: dense in, GRU(64), two dense layers out.

    Input rows are ``obs (+) one-hot(intention) (+) one-hot(agent id)``;
    an intention index of -1 (no intention, flat mode) encodes as zeros.
    """

    def __init__(self, obs_dim: int, n_actions: int, n_intentions: int,
                 max_agents: int, rng: np.random.Generator | None = None,
                 hidden: int = 64, name: str = "behavior"):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.n_intentions = n_intentions
        self.max_agents = max_agents
        self.hidden = hidden
        self.in_dim = obs_dim + n_intentions + max_agents
        self.fc_in = DenseLayer(f"{name}.fc_in", self.in_dim, hidden, "relu", rng)
        self.gru = GruCell(f"{name}.gru", hidden, hidden, rng)
        self.fc_mid = DenseLayer(f"{name}.fc_mid", hidden, hidden, "relu", rng)
        self.head = DenseLayer(f"{name}.head", hidden, n_actions, "identity", rng)

    def parameters(self):
        return (self.fc_in.parameters() + self.gru.parameters()
                + self.fc_mid.parameters() + self.head.parameters())

    def init_hidden(self, rows: int) -> np.ndarray:
        return np.zeros((rows, self.hidden))

    def build_input(self, obs_rows: np.ndarray, z_ids, agent_ids) -> np.ndarray:
        """Stack [obs | z one-hot | agent-id one-hot] rows; z id -1 means none."""
        obs_rows = np.atleast_2d(np.asarray(obs_rows, dtype=np.float64))
        if obs_rows.shape[-1] != self.obs_dim:
            raise DimensionError(
                f"behavior input obs width {obs_rows.shape[-1]} != {self.obs_dim}")
        ids = np.asarray(agent_ids, dtype=np.int64)
        if np.any(ids >= self.max_agents):
            raise DimensionError(
                f"agent id {ids.max()} exceeds id encoding width {self.max_agents}")
        return np.concatenate(
            [obs_rows, one_hot(z_ids, self.n_intentions), one_hot(ids, self.max_agents)],
            axis=1)

    def step(self, x_rows: np.ndarray, hidden: np.ndarray, need_cache: bool = True):
        """One recurrent step over a batch of rows -> (q, new_hidden, cache)."""
        h1, c1 = self.fc_in.forward(x_rows)
        h2, c2 = self.gru.forward(h1, hidden)
        h3, c3 = self.fc_mid.forward(h2)
        q, c4 = self.head.forward(h3)
        cache = (c1, c2, c3, c4) if need_cache else None
        return q, h2, cache

    def backward_step(self, cache, dq, dh_next):
        """Backward through one step; dh_next is the gradient flowing into this
        step's hidden output from later timesteps. Returns dh_prev."""
        c1, c2, c3, c4 = cache
        dh = self.fc_mid.backward(c3, self.head.backward(c4, dq))
        dh = dh + dh_next
        dx, dh_prev = self.gru.backward(c2, dh)
        self.fc_in.backward(c1, dx)
        return dh_prev


class PosteriorNet:
    """Variational posterior over intentions given (obs, next obs)."""

    def __init__(self, obs_dim: int, n_intentions: int,
                 rng: np.random.Generator | None = None,
                 hidden: int = 64, name: str = "posterior"):
        self.obs_dim = obs_dim
        self.n_intentions = n_intentions
        self.layers = [
            DenseLayer(f"{name}.fc1", 2 * obs_dim, hidden, "relu", rng),
            DenseLayer(f"{name}.fc2", hidden, hidden, "relu", rng),
            DenseLayer(f"{name}.head", hidden, n_intentions, "identity", rng),
        ]

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def pair_input(self, obs_t, obs_t1) -> np.ndarray:
        a = np.atleast_2d(np.asarray(obs_t, dtype=np.float64))
        b = np.atleast_2d(np.asarray(obs_t1, dtype=np.float64))
        if a.shape[-1] != self.obs_dim or b.shape[-1] != self.obs_dim:
            raise DimensionError("posterior input width mismatch")
        return np.concatenate([a, b], axis=1)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def distribution(self, obs_t, obs_t1) -> np.ndarray:
        logits, _ = self.forward(self.pair_input(obs_t, obs_t1))
        return softmax(logits)

    def backward(self, caches, dlogits):
        d = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            d = layer.backward(cache, d)
        return d


def policy_distribution(q_values, temperature: float = 1.0) -> np.ndarray:
    """Boltzmann distribution over intentions derived from high-level Q-values."""
    return softmax(np.asarray(q_values, dtype=np.float64), temperature)


def select_discrete(q_values, epsilon: float, rng: np.random.Generator,
                    avail_mask=None) -> int:
    """Epsilon-greedy pick over available entries; greedy ties go to the
    lowest index. Used for both intention and action selection."""
    if not 0.0 <= epsilon <= 1.0:
        raise ParameterError(f"epsilon must lie in [0, 1], got {epsilon}")
    q = np.asarray(q_values, dtype=np.float64)
    if avail_mask is None:
        avail = np.ones(q.shape[-1], dtype=bool)
    else:
        avail = np.asarray(avail_mask, dtype=bool)
        if avail.shape != q.shape:
            raise DimensionError("availability mask shape mismatch")
    options = np.nonzero(avail)[0]
    if options.size == 0:
        raise ParameterError("no available entries to select from")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(options[rng.integers(options.size)])
    masked = np.where(avail, q, -np.inf)
    return int(np.argmax(masked))


class NetworkBundle:
    """All trainable components plus hard-copied target networks.

    Parameter groups follow the training objective: the intention network
    trains from the high-level TD loss, the behavior network and monotonic
    mixer from the low-level TD loss, the posterior from the KL losses.
    """

    def __init__(self, obs_dim: int, state_dim: int, n_actions: int,
                 n_intentions: int, max_agents: int, n_agents: int,
                 rng: np.random.Generator | None = None,
                 hidden: int = 64, narrow: int = 32, mixing_embed: int = 32):
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.n_intentions = n_intentions
        self.max_agents = max_agents
        self.n_agents = n_agents

        def build(prefix):
            return dict(
                intention=IntentionNet(obs_dim, n_intentions, rng, hidden, narrow,
                                       name=f"{prefix}intention"),
                behavior=BehaviorNet(obs_dim, n_actions, n_intentions, max_agents,
                                     rng, hidden, name=f"{prefix}behavior"),
                mixer=MonotonicMixer(state_dim, n_agents, rng, mixing_embed,
                                     name=f"{prefix}mixer"),
                posterior=PosteriorNet(obs_dim, n_intentions, rng, hidden,
                                       name=f"{prefix}posterior"),
            )

        online = build("")
        target = build("target_")
        self.intention = online["intention"]
        self.behavior = online["behavior"]
        self.mixer = online["mixer"]
        self.posterior = online["posterior"]
        self.target_intention = target["intention"]
        self.target_behavior = target["behavior"]
        self.target_mixer = target["mixer"]
        self.target_posterior = target["posterior"]
        self.sync_targets()

    # -- parameter groups ---------------------------------------------------

    def intention_parameters(self):
        return self.intention.parameters()

    def behavior_parameters(self):
        return self.behavior.parameters() + self.mixer.parameters()

    def posterior_parameters(self):
        return self.posterior.parameters()

    def parameters(self):
        return (self.intention_parameters() + self.behavior_parameters()
                + self.posterior_parameters())

    def target_parameters(self):
        return (self.target_intention.parameters()
                + self.target_behavior.parameters()
                + self.target_mixer.parameters()
                + self.target_posterior.parameters())

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def sync_targets(self):
        """Hard copy of every online parameter into its target twin."""
        for src, dst in zip(self.parameters(), self.target_parameters()):
            dst.value[...] = src.value

    # -- checkpointing -------------------------------------------------------

    def save(self, path, meta: dict | None = None):
        save_parameter_blocks(path, self.parameters() + self.target_parameters(),
                              meta=meta)

    def load(self, path) -> dict:
        return load_into_parameters(path, self.parameters() + self.target_parameters())


def build_networks(exp_config, rng: np.random.Generator | None = None) -> NetworkBundle:
    """Size a NetworkBundle from an experiment config's environment section."""
    env_cfg = exp_config.env
    return NetworkBundle(
        obs_dim=env_mod.obs_dim_for(env_cfg),
        state_dim=env_mod.state_dim_for(env_cfg),
        n_actions=env_mod.n_actions_for(env_cfg),
        n_intentions=exp_config.n_intentions,
        max_agents=exp_config.max_agents,
        n_agents=env_cfg.n_agents,
        rng=rng,
        hidden=exp_config.hidden_dim,
        narrow=exp_config.intention_narrow,
        mixing_embed=exp_config.mixing_embed,
    )
