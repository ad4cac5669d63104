"""Experiment configuration: schema, strict parsing, canonical rendering.

Config files are line-oriented ``key = value`` pairs under ``[section]``
headers with ``#`` comments. Unknown keys are rejected with their full
field path. ``render_config`` emits a canonical form that re-parses to an
identical config, and the config hash that stamps every output file is
taken over that canonical text.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .env import ConfigError, EnvConfig, env_preset

MODES = ("full_method", "flat_qmix", "no_weighting")
HIGH_LEVEL_SAMPLING = ("eps_greedy", "boltzmann")


@dataclass
class ExperimentConfig:
    # [run]
    mode: str = "full_method"
    seeds: tuple = (1, 2, 3, 4, 5)
    total_env_steps: int = 150_000
    eval_interval: int = 10_000
    eval_episodes: int = 32
    checkpoint_interval: int = 0  # episodes between checkpoints; 0 = final only
    dump_final_eval: bool = True
    output_dir: str = "runs/experiment"
    # [env]
    env: EnvConfig = field(default_factory=EnvConfig)
    # [net]
    n_intentions: int = 16
    hidden_dim: int = 64
    intention_narrow: int = 32
    mixing_embed: int = 32
    max_agents: int = 0  # 0 resolves to env.n_agents + 2 (ad-hoc headroom)
    # [algo]
    gamma: float = 0.99
    lr: float = 5e-4
    rms_decay: float = 0.99
    rms_eps: float = 1e-5
    lambda_aux: float = 1.0
    lambda_div: float = 1.0
    beta_intrinsic: float = 0.1
    temperature: float = 1.0
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_steps: int = 70_000
    batch_size: int = 4
    buffer_episodes: int = 2000
    target_sync_episodes: int = 200
    gap_epsilon: float = 0.01
    mi_floor: float = 1e-6
    kl_to_intention: bool = False
    high_level_sampling: str = "eps_greedy"

    def resolved(self) -> "ExperimentConfig":
        cfg = self
        if cfg.max_agents == 0:
            cfg = replace(cfg, max_agents=cfg.env.n_agents + 2)
        return cfg.validate()

    def validate(self) -> "ExperimentConfig":
        self.env.validate()
        checks = [
            (self.mode in MODES, "run.mode", f"must be one of {MODES}"),
            (len(self.seeds) >= 1, "run.seeds", "need at least one seed"),
            (self.total_env_steps >= 1, "run.total_env_steps", "must be >= 1"),
            (self.eval_interval >= 1, "run.eval_interval", "must be >= 1"),
            (self.eval_episodes >= 1, "run.eval_episodes", "must be >= 1"),
            (self.n_intentions >= 2, "net.n_intentions", "need at least 2 intentions"),
            (self.max_agents >= self.env.n_agents, "net.max_agents",
             "must cover env.n_agents"),
            (0.0 <= self.gamma <= 1.0, "algo.gamma", "must lie in [0, 1]"),
            (self.lr > 0, "algo.lr", "must be positive"),
            (self.lambda_aux >= 0 and self.lambda_div >= 0, "algo.lambda_aux",
             "loss multipliers must be nonnegative"),
            (self.temperature > 0, "algo.temperature", "must be positive"),
            (0 <= self.eps_end <= self.eps_start <= 1, "algo.eps_start",
             "need 0 <= eps_end <= eps_start <= 1"),
            (self.eps_anneal_steps >= 1, "algo.eps_anneal_steps", "must be >= 1"),
            (self.batch_size >= 1, "algo.batch_size", "must be >= 1"),
            (self.buffer_episodes >= self.batch_size, "algo.buffer_episodes",
             "must hold at least one batch"),
            (self.target_sync_episodes >= 1, "algo.target_sync_episodes",
             "must be >= 1"),
            (self.gap_epsilon >= 0, "algo.gap_epsilon", "must be nonnegative"),
            (self.mi_floor > 0, "algo.mi_floor", "must be positive"),
            (self.high_level_sampling in HIGH_LEVEL_SAMPLING,
             "algo.high_level_sampling", f"must be one of {HIGH_LEVEL_SAMPLING}"),
        ]
        for ok, path, msg in checks:
            if not ok:
                raise ConfigError(f"{path}: {msg}")
        return self


_RUN_KEYS = ("mode", "seeds", "total_env_steps", "eval_interval", "eval_episodes",
             "checkpoint_interval", "dump_final_eval", "output_dir")
_ENV_KEYS = ("kind", "n_agents", "n_enemies", "map_w", "map_h", "n_walls",
             "view_radius", "attack_range", "episode_limit", "catch_reward",
             "solo_penalty", "per_hit_reward", "prey_hp", "prey_regen",
             "payoff_matrix", "seed")
_NET_KEYS = ("n_intentions", "hidden_dim", "intention_narrow", "mixing_embed",
             "max_agents")
_ALGO_KEYS = ("gamma", "lr", "rms_decay", "rms_eps", "lambda_aux", "lambda_div",
              "beta_intrinsic", "temperature", "eps_start", "eps_end",
              "eps_anneal_steps", "batch_size", "buffer_episodes",
              "target_sync_episodes", "gap_epsilon", "mi_floor",
              "kl_to_intention", "high_level_sampling")

_EXP_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_ENV_TYPES = {f.name: f.type for f in fields(EnvConfig)}


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _render_payoff(matrix) -> str:
    if matrix is None:
        return "none"
    return ";".join(",".join(repr(float(v)) for v in row) for row in matrix)


def _parse_payoff(text: str):
    if text == "none":
        return None
    return tuple(tuple(float(v) for v in row.split(",")) for row in text.split(";"))


def _parse_value(field_path: str, kind: str, text: str):
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text not in ("true", "false"):
                raise ValueError("expected true or false")
            return text == "true"
        if kind == "tuple":
            return tuple(int(v) for v in text.split(",") if v != "")
        return text
    except ValueError as exc:
        raise ConfigError(f"{field_path}: bad value {text!r} ({exc})") from None


def _type_name(annotation: str) -> str:
    text = str(annotation)
    for kind in ("bool", "int", "float", "tuple"):
        if text.startswith(kind):
            return kind
    return "str"


def render_config(cfg: ExperimentConfig) -> str:
    """Canonical text: every key, fixed order, values that re-parse exactly."""
    lines = ["[run]"]
    for key in _RUN_KEYS:
        lines.append(f"{key} = {_render_value(getattr(cfg, key))}")
    lines.append("")
    lines.append("[env]")
    for key in _ENV_KEYS:
        value = getattr(cfg.env, key)
        if key == "payoff_matrix":
            lines.append(f"{key} = {_render_payoff(value)}")
        else:
            lines.append(f"{key} = {_render_value(value)}")
    lines.append("")
    lines.append("[net]")
    for key in _NET_KEYS:
        lines.append(f"{key} = {_render_value(getattr(cfg, key))}")
    lines.append("")
    lines.append("[algo]")
    for key in _ALGO_KEYS:
        lines.append(f"{key} = {_render_value(getattr(cfg, key))}")
    lines.append("")
    return "\n".join(lines)


def parse_config(text: str) -> ExperimentConfig:
    """Strict parse of the canonical format; unknown keys are fatal."""
    section = None
    exp_kwargs: dict = {}
    env_kwargs: dict = {}
    env_preset_name = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in ("run", "env", "net", "algo"):
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        path = f"{section}.{key}"
        if section == "env":
            if key == "preset":
                env_preset_name = value
            elif key == "payoff_matrix":
                env_kwargs[key] = _parse_payoff(value)
            elif key in _ENV_KEYS:
                env_kwargs[key] = _parse_value(path, _type_name(_ENV_TYPES[key]), value)
            else:
                raise ConfigError(f"{path}: unknown key")
        else:
            allowed = {"run": _RUN_KEYS, "net": _NET_KEYS, "algo": _ALGO_KEYS}[section]
            if key not in allowed:
                raise ConfigError(f"{path}: unknown key")
            exp_kwargs[key] = _parse_value(path, _type_name(_EXP_TYPES[key]), value)
    if env_preset_name is not None:
        env_cfg = env_preset(env_preset_name, **env_kwargs)
    else:
        env_cfg = EnvConfig(**env_kwargs)
    return ExperimentConfig(env=env_cfg, **exp_kwargs).resolved()


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(render_config(cfg).encode()).hexdigest()[:12]


# Ready-made experiment presets. The paper-sized scenarios keep their table
# settings; the *_small / matrix presets are desk-scale budgets sized so the
# acceptance suite finishes on a laptop.
def experiment_preset(name: str, **overrides) -> ExperimentConfig:
    presets = {
        "pursuit_small": dict(
            env=env_preset("pursuit_small"),
            total_env_steps=150_000,
            eval_interval=15_000,
            eval_episodes=32,
            eps_anneal_steps=70_000,
            beta_intrinsic=0.5,
            buffer_episodes=500,
            output_dir="runs/pursuit_small",
        ),
        "matrix_penalty": dict(
            env=env_preset("matrix_penalty"),
            total_env_steps=20_000,
            eval_interval=2_000,
            eval_episodes=32,
            eps_anneal_steps=8_000,
            buffer_episodes=1_000,
            output_dir="runs/matrix_penalty",
        ),
        "pursuit": dict(
            env=env_preset("pursuit"),
            total_env_steps=1_000_000,
            eval_interval=20_000,
            output_dir="runs/pursuit",
        ),
        "pursuit_hard": dict(
            env=env_preset("pursuit_hard"),
            total_env_steps=2_000_000,
            eval_interval=20_000,
            output_dir="runs/pursuit_hard",
        ),
        "tiger": dict(
            env=env_preset("tiger"),
            total_env_steps=1_000_000,
            eval_interval=20_000,
            output_dir="runs/tiger",
        ),
    }
    if name not in presets:
        raise ConfigError(
            f"experiment preset: unknown preset {name!r} (have {sorted(presets)})")
    params = presets[name]
    params.update(overrides)
    return ExperimentConfig(**params).resolved()
