"""Differentiable building blocks shared by every learned component.

Everything is plain numpy float64; there is no graph capture. Each layer
owns named :class:`Parameter` blocks, returns an opaque cache from its
forward pass and accumulates gradients in place during backward, so
parameter containers stay read-only while several rollout workers evaluate
them. ``finite_diff_gradcheck`` is the house oracle: every hand-written
backward in the repo is expected to pass it at relative tolerance 1e-4.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-8

CHECKPOINT_MAGIC = b"JIMCKPT1\n"


class NumericError(RuntimeError):
    """Non-finite values escaped an operation; message carries the parameter path."""


class DimensionError(ValueError):
    """Operand shapes do not match the declared dimensions."""


class ParameterError(ValueError):
    """A scalar argument is outside its allowed range."""


class Parameter:
    """Named float64 array with a same-shaped gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def fan_in_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weight init, seeded by the run."""
    limit = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-limit, limit, size=shape)


# Bias blocks use the weight distribution shrunk by this factor: exactly-zero
# biases park dead relu rows on the kink (breaking finite differences), while
# full-scale biases drown the input signal at initialization, leaving e.g. the
# intention one-hot unable to differentiate initial behavior.
BIAS_INIT_SCALE = 0.1


def one_hot(indices, width: int) -> np.ndarray:
    """Row-wise one-hot encoding; a negative index yields an all-zero row."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros(idx.shape + (width,), dtype=np.float64)
    flat = idx.reshape(-1)
    rows = np.nonzero(flat >= 0)[0]
    out.reshape(-1, width)[rows, flat[rows]] = 1.0
    return out


def _ensure_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative inputs saturates to the correct limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


_ACTIVATIONS = ("identity", "relu", "tanh")


class DenseLayer:
    """Fully connected layer ``y = act(x @ w + b)``.

    ``forward`` accepts a single vector or a [batch, in_dim] matrix and
    returns ``(y, cache)``; ``backward`` consumes the cache, accumulates
    parameter gradients and returns the input gradient.
    """

    def __init__(self, name: str, in_dim: int, out_dim: int, activation: str = "identity",
                 rng: np.random.Generator | None = None):
        if activation not in _ACTIVATIONS:
            raise ParameterError(f"unknown activation {activation!r}")
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        if rng is None:
            w = np.zeros((in_dim, out_dim))
            b = np.zeros(out_dim)
        else:
            w = fan_in_uniform(rng, in_dim, (in_dim, out_dim))
            b = BIAS_INIT_SCALE * fan_in_uniform(rng, in_dim, out_dim)
        self.w = Parameter(f"{name}.w", w)
        self.b = Parameter(f"{name}.b", b)

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"{self.name}: input width {x.shape[-1]} != {self.in_dim}")
        squeeze = x.ndim == 1
        x2 = x[None, :] if squeeze else x
        pre = x2 @ self.w.value + self.b.value
        if self.activation == "relu":
            y = np.maximum(pre, 0.0)
        elif self.activation == "tanh":
            y = np.tanh(pre)
        else:
            y = pre
        _ensure_finite(y, self.name)
        cache = (x2, y, squeeze)
        return (y[0] if squeeze else y), cache

    def backward(self, cache, dy):
        x2, y, squeeze = cache
        dy2 = np.asarray(dy, dtype=np.float64)
        if squeeze:
            dy2 = dy2[None, :]
        if dy2.shape != y.shape:
            raise DimensionError(f"{self.name}: bad upstream gradient shape {dy2.shape}")
        if self.activation == "relu":
            dpre = dy2 * (y > 0.0)
        elif self.activation == "tanh":
            dpre = dy2 * (1.0 - y * y)
        else:
            dpre = dy2
        self.w.grad += x2.T @ dpre
        self.b.grad += dpre.sum(axis=0)
        dx = dpre @ self.w.value.T
        return dx[0] if squeeze else dx


class GruCell:
    """Single gated recurrent cell with a 64-dim hidden state by default.

    Gate blocks are stored fused in ``[update | reset | candidate]`` order;
    the reset gate multiplies the projected previous hidden state (the
    common single-matmul form). Zero parameters map a zero hidden state to
    a zero hidden state.
    """

    def __init__(self, name: str, in_dim: int, hidden_dim: int = 64,
                 rng: np.random.Generator | None = None):
        self.name = name
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        h = hidden_dim
        if rng is None:
            wx = np.zeros((in_dim, 3 * h))
            wh = np.zeros((h, 3 * h))
            b = np.zeros(3 * h)
        else:
            wx = fan_in_uniform(rng, in_dim, (in_dim, 3 * h))
            wh = fan_in_uniform(rng, h, (h, 3 * h))
            b = BIAS_INIT_SCALE * fan_in_uniform(rng, h, 3 * h)
        self.wx = Parameter(f"{name}.wx", wx)
        self.wh = Parameter(f"{name}.wh", wh)
        self.b = Parameter(f"{name}.b", b)

    def parameters(self) -> list[Parameter]:
        return [self.wx, self.wh, self.b]

    def gate_blocks(self) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Per-gate (input weights, hidden weights, bias) views, for inspection."""
        h = self.hidden_dim
        out = {}
        for k, gate in enumerate(("update", "reset", "candidate")):
            sl = slice(k * h, (k + 1) * h)
            out[gate] = (self.wx.value[:, sl], self.wh.value[:, sl], self.b.value[sl])
        return out

    def init_hidden(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.hidden_dim))

    def forward(self, x, hidden):
        x = np.asarray(x, dtype=np.float64)
        hprev = np.asarray(hidden, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
            hprev = hprev[None, :]
        h = self.hidden_dim
        if x.shape[-1] != self.in_dim or hprev.shape[-1] != h:
            raise DimensionError(
                f"{self.name}: got input {x.shape}, hidden {hprev.shape}")
        gx = x @ self.wx.value + self.b.value
        gh = hprev @ self.wh.value
        u = _sigmoid(gx[:, :h] + gh[:, :h])
        r = _sigmoid(gx[:, h:2 * h] + gh[:, h:2 * h])
        ghc = gh[:, 2 * h:]
        c = np.tanh(gx[:, 2 * h:] + r * ghc)
        hnew = u * hprev + (1.0 - u) * c
        _ensure_finite(hnew, self.name)
        cache = (x, hprev, u, r, c, ghc, squeeze)
        return (hnew[0] if squeeze else hnew), cache

    def backward(self, cache, dh_new):
        """Accumulate parameter grads; return (dx, dh_prev)."""
        x, hprev, u, r, c, ghc, squeeze = cache
        d = np.asarray(dh_new, dtype=np.float64)
        if squeeze:
            d = d[None, :]
        du = d * (hprev - c)
        dc = d * (1.0 - u)
        dh = d * u
        dpre_c = dc * (1.0 - c * c)
        dr = dpre_c * ghc
        dpre_u = du * u * (1.0 - u)
        dpre_r = dr * r * (1.0 - r)
        dgx = np.concatenate([dpre_u, dpre_r, dpre_c], axis=1)
        dgh = np.concatenate([dpre_u, dpre_r, dpre_c * r], axis=1)
        self.wx.grad += x.T @ dgx
        self.b.grad += dgx.sum(axis=0)
        self.wh.grad += hprev.T @ dgh
        dx = dgx @ self.wx.value.T
        dh = dh + dgh @ self.wh.value.T
        if squeeze:
            return dx[0], dh[0]
        return dx, dh


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Boltzmann distribution over the last axis, max-subtracted for stability."""
    if not temperature > 0.0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def categorical_kl(p, q, floor: float = PROB_FLOOR):
    """sum p * ln(p/q) over the last axis.

    Zero-probability p entries contribute 0; q is floored at ``floor``
    inside the log, and the result is clamped at 0 so the floor cannot
    push an identical pair negative.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1] != q.shape[-1]:
        raise DimensionError(f"support mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    logq = np.log(np.maximum(q, floor))
    logp = np.log(np.where(p > 0.0, p, 1.0))
    out = np.maximum((p * (logp - logq)).sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


class RmsProp:
    """RMSprop over a fixed parameter list with one accumulator per block."""

    def __init__(self, params, lr: float = 5e-4, decay: float = 0.99,
                 eps_stability: float = 1e-5):
        if not lr > 0:
            raise ParameterError("lr must be positive")
        if not 0.0 <= decay < 1.0:
            raise ParameterError("decay must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.decay = decay
        self.eps_stability = eps_stability
        self._acc = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, acc in zip(self.params, self._acc):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {p.name}")
            acc *= self.decay
            acc += (1.0 - self.decay) * g * g
            p.value -= self.lr * g / np.sqrt(acc + self.eps_stability)


@dataclass
class GradCheckBlock:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    blocks: list[GradCheckBlock]
    tol: float
    perturb: float

    @property
    def passed(self) -> bool:
        return all(b.max_rel_err <= self.tol for b in self.blocks)

    def lines(self) -> list[str]:
        out = []
        for b in self.blocks:
            flag = "PASS" if b.max_rel_err <= self.tol else "FAIL"
            out.append(f"{flag}  {b.name:<40s} max_rel_err={b.max_rel_err:.3e} "
                       f"({b.checked} entries)")
        return out


def finite_diff_gradcheck(loss_fn, params, perturb: float = 1e-5, tol: float = 1e-4,
                          max_entries_per_block: int | None = 64,
                          rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare the analytic gradients stored on ``params`` against central
    finite differences of ``loss_fn`` (a deterministic forward-only callable).

    The caller runs its own backward first; this function only perturbs
    values and reads ``param.grad``. Relative error uses
    ``|fd - grad| / max(|fd| + |grad|, 1e-6)`` per entry, reported as a
    per-block maximum.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    blocks = []
    for p in params:
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        n = flat.size
        if max_entries_per_block is None or n <= max_entries_per_block:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=max_entries_per_block, replace=False)
        worst = 0.0
        for i in idxs:
            old = flat[i]
            flat[i] = old + perturb
            f_plus = loss_fn()
            flat[i] = old - perturb
            f_minus = loss_fn()
            flat[i] = old
            fd = (f_plus - f_minus) / (2.0 * perturb)
            rel = abs(fd - gflat[i]) / max(abs(fd) + abs(gflat[i]), 1e-6)
            worst = max(worst, rel)
        blocks.append(GradCheckBlock(p.name, worst, len(idxs)))
    return GradCheckReport(blocks, tol=tol, perturb=perturb)


def save_parameter_blocks(path, blocks, meta: dict | None = None):
    """Write named float64 blocks to a versioned binary container.

    ``blocks`` is either a dict name -> array or an iterable of Parameters.
    The byte layout is fully determined by the content, so
    save -> load -> save reproduces the file bit for bit.
    """
    if not isinstance(blocks, dict):
        blocks = {p.name: p.value for p in blocks}
    header = {
        "version": 1,
        "meta": meta or {},
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in blocks.items()],
    }
    payload = b"".join(
        np.ascontiguousarray(v, dtype="<f8").tobytes() for v in blocks.values())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        f.write(b"\n")
        f.write(payload)


def load_parameter_blocks(path):
    """Inverse of :func:`save_parameter_blocks`; returns (blocks dict, meta)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        header = json.loads(f.readline().decode())
        blocks = {}
        for spec in header["blocks"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated block {spec['name']}")
            blocks[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return blocks, header.get("meta", {})


def load_into_parameters(path, params):
    """Restore parameter values in place from a checkpoint file."""
    blocks, meta = load_parameter_blocks(path)
    for p in params:
        if p.name not in blocks:
            raise KeyError(f"checkpoint missing block {p.name}")
        if blocks[p.name].shape != p.value.shape:
            raise DimensionError(
                f"block {p.name}: checkpoint shape {blocks[p.name].shape} "
                f"!= parameter shape {p.value.shape}")
        p.value[...] = blocks[p.name]
    return meta
