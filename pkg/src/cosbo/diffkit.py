"""Small reverse-mode differentiation stack.

Only the primitives needed by the critic and actor losses are supported:
affine maps, relu, tanh, exp, log, square, elementwise min, add/sub/mul,
sum and mean reductions, plus structural ops (row and column slicing,
concatenation) that carry no arithmetic.  Values are float64 numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_SQUASH_EPS = 1e-6
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Tensor:
    """A node of the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self):
        if self.value.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.value.shape}")
        order = _topological(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if g.shape != node.value.shape:
        g = _unbroadcast(g, node.value.shape)
    # never accumulate in place: g may alias another node's gradient or a broadcast view
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn) -> Tensor:
    out = Tensor(value, parents)
    if out.requires_grad:
        out.backward_fn = backward_fn
    else:
        out.parents = ()
    return out


# primitives ---------------------------------------------------------------


def affine(x, w: Tensor, b: Tensor) -> Tensor:
    x = as_tensor(x)

    def back(g):
        if w.requires_grad:
            _accumulate(w, x.value.T @ g)
            _accumulate(b, g.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, g @ w.value.T)

    return _node(x.value @ w.value + b.value, (x, w, b), back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.value + b.value, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(a.value - b.value, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return _node(a.value * b.value, (a, b), back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0

    def back(g):
        _accumulate(x, g * mask)

    return _node(np.maximum(x.value, 0.0), (x,), back)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.value)

    def back(g):
        _accumulate(x, g * (1.0 - t * t))

    return _node(t, (x,), back)


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.value)

    def back(g):
        _accumulate(x, g * e)

    return _node(e, (x,), back)


def log(x) -> Tensor:
    x = as_tensor(x)

    def back(g):
        _accumulate(x, g / x.value)

    return _node(np.log(x.value), (x,), back)


def square(x) -> Tensor:
    x = as_tensor(x)

    def back(g):
        _accumulate(x, 2.0 * g * x.value)

    return _node(x.value * x.value, (x,), back)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.value <= b.value

    def back(g):
        _accumulate(a, g * take_a)
        _accumulate(b, g * ~take_a)

    return _node(np.minimum(a.value, b.value), (a, b), back)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)

    def back(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.value.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.value.shape))

    return _node(x.value.sum(axis=axis), (x,), back)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def columns(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        _accumulate(x, full)

    return _node(x.value[:, start:stop], (x,), back)


def rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.value)
        full[start:stop] = g
        _accumulate(x, full)

    return _node(x.value[start:stop], (x,), back)


def concat(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    split = a.value.shape[1]

    def back(g):
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    return _node(np.concatenate([a.value, b.value], axis=1), (a, b), back)


def grad(loss_builder: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``loss_builder()`` and return (loss value, d loss / d param for each param)."""
    loss = loss_builder()
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    for p in params:
        p.grad = None
    if loss.requires_grad:
        loss.backward()
    grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]
    return float(loss.value), grads


# networks -----------------------------------------------------------------

_ACTIVATIONS = {"relu": (relu, lambda v: np.maximum(v, 0.0)), "tanh": (tanh, np.tanh)}


def param(value) -> Tensor:
    return Tensor(value, requires_grad=True)


class Mlp:
    """Fully connected network; hidden layers use ``activation``, the output layer is linear."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator | None = None,
                 activation: str | Sequence[str] = "relu"):
        if len(widths) < 2:
            raise ValueError("an Mlp needs at least input and output widths")
        self.widths = [int(w) for w in widths]
        n_hidden = len(self.widths) - 2
        if isinstance(activation, str):
            activation = [activation] * n_hidden
        if len(activation) != n_hidden or any(a not in _ACTIVATIONS for a in activation):
            raise ValueError(f"bad activation list {activation!r}")
        self.activations = list(activation)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for n_in, n_out in zip(self.widths[:-1], self.widths[1:]):
            bound = 1.0 / math.sqrt(n_in)
            self.weights.append(param(rng.uniform(-bound, bound, size=(n_in, n_out))))
            self.biases.append(param(rng.uniform(-bound, bound, size=n_out)))

    @property
    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return int(np.sum([p.value.size for p in self.params]))

    def __call__(self, x, frozen: bool = False) -> Tensor:
        """Graph evaluation; ``frozen`` treats the parameters as constants."""
        h = as_tensor(x)
        self._check_width(h.value)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if frozen:
                w, b = Tensor(w.value), Tensor(b.value)
            h = affine(h, w, b)
            if i < last:
                h = _ACTIVATIONS[self.activations[i]][0](h)
        return h

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Graph-free evaluation; a pure function of (params, x)."""
        h = np.asarray(x, dtype=np.float64)
        squeeze = h.ndim == 1
        if squeeze:
            h = h[None, :]
        self._check_width(h)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value + b.value
            if i < last:
                h = _ACTIVATIONS[self.activations[i]][1](h)
        return h[0] if squeeze else h

    def _check_width(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {x.shape[-1]} does not match layer width {self.widths[0]}")

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.widths = list(self.widths)
        clone.activations = list(self.activations)
        clone.weights = [param(w.value.copy()) for w in self.weights]
        clone.biases = [param(b.value.copy()) for b in self.biases]
        return clone

    def flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params])

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise ValueError(f"expected {self.n_params()} parameters, got {flat.size}")
        i = 0
        for p in self.params:
            n = p.value.size
            p.value = flat[i:i + n].reshape(p.value.shape).copy()
            i += n


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    """Polyak averaging: target <- (1 - tau) * target + tau * online."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if target.widths != online.widths:
        raise ValueError(f"shape mismatch {target.widths} vs {online.widths}")
    for t, o in zip(target.params, online.params):
        if tau == 1.0:
            t.value = o.value.copy()
        else:
            t.value = (1.0 - tau) * t.value + tau * o.value


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class QFunction:
    """Twin critics over state ⊕ action."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (64, 64),
                 rng: np.random.Generator | None = None, twin: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [obs_dim + act_dim, *hidden, 1]
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.critics = [Mlp(widths, rng)]
        if twin:
            self.critics.append(Mlp(widths, rng))

    @property
    def params(self) -> list[Tensor]:
        return [p for c in self.critics for p in c.params]

    def __call__(self, states, actions, frozen: bool = False) -> list[Tensor]:
        """Per-critic values as (batch, 1) graph nodes."""
        x = concat(as_tensor(states), as_tensor(actions))
        return [c(x, frozen) for c in self.critics]

    def each(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Graph-free values of every critic, shape (n_critics, batch)."""
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        return np.stack([c.forward(x)[:, 0] for c in self.critics])

    def min_value(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.each(states, actions).min(axis=0)

    def copy(self) -> "QFunction":
        clone = QFunction.__new__(QFunction)
        clone.obs_dim, clone.act_dim = self.obs_dim, self.act_dim
        clone.critics = [c.copy() for c in self.critics]
        return clone

    def soft_update_from(self, online: "QFunction", tau: float) -> None:
        for t, o in zip(self.critics, online.critics):
            soft_update(t, o, tau)


class StochasticPolicy:
    """Tanh-squashed Gaussian policy scaled to ``[-action_bound, action_bound]``."""

    def __init__(self, obs_dim: int, act_dim: int, action_bound: float,
                 hidden: Sequence[int] = (64, 64), rng: np.random.Generator | None = None,
                 trunk: Mlp | None = None):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.action_bound = float(action_bound)
        self.trunk = trunk if trunk is not None else Mlp([obs_dim, *hidden, 2 * act_dim], rng)

    @property
    def params(self) -> list[Tensor]:
        return self.trunk.params

    def copy(self) -> "StochasticPolicy":
        return StochasticPolicy(self.obs_dim, self.act_dim, self.action_bound, trunk=self.trunk.copy())

    @staticmethod
    def _squash_log_std(raw):
        # smooth clamp into [LOG_STD_MIN, LOG_STD_MAX]
        half_range = 0.5 * (LOG_STD_MAX - LOG_STD_MIN)
        if isinstance(raw, Tensor):
            return add(mul(add(tanh(raw), 1.0), half_range), LOG_STD_MIN)
        return LOG_STD_MIN + half_range * (np.tanh(raw) + 1.0)

    def distribution(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(pre-squash mean, log_std) without building a graph."""
        out = np.atleast_2d(self.trunk.forward(np.atleast_2d(states)))
        d = self.act_dim
        return out[:, :d], self._squash_log_std(out[:, d:])

    def rsample(self, states, noise: np.ndarray) -> tuple[Tensor, Tensor]:
        """Reparameterised (action, log_prob) as graph nodes; ``noise`` is standard normal."""
        d = self.act_dim
        out = self.trunk(states)
        mu = columns(out, 0, d)
        log_std = self._squash_log_std(columns(out, d, 2 * d))
        pre = add(mu, mul(exp(log_std), noise))
        t = tanh(pre)
        correction = log(add(sub(1.0, square(t)), _SQUASH_EPS))
        per_dim = sub(sub(-0.5 * noise * noise - _HALF_LOG_2PI - math.log(self.action_bound), log_std),
                      correction)
        return mul(t, self.action_bound), sum(per_dim, axis=1)

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Numpy fast path of :meth:`rsample`; returns (actions, log_probs)."""
        mu, log_std = self.distribution(states)
        noise = rng.standard_normal(mu.shape)
        return self.sample_with_noise(mu, log_std, noise)

    def sample_with_noise(self, mu, log_std, noise):
        t = np.tanh(mu + np.exp(log_std) * noise)
        log_prob = (-0.5 * noise ** 2 - _HALF_LOG_2PI - np.log(self.action_bound) - log_std
                    - np.log(1.0 - t * t + _SQUASH_EPS)).sum(axis=1)
        t = np.clip(t, -1.0 + 1e-12, 1.0 - 1e-12)
        return t * self.action_bound, log_prob

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Density of given (strictly interior) actions, matching :meth:`sample`'s log_prob."""
        mu, log_std = self.distribution(states)
        t = np.atleast_2d(actions) / self.action_bound
        pre = np.arctanh(t)
        noise = (pre - mu) / np.exp(log_std)
        return (-0.5 * noise ** 2 - _HALF_LOG_2PI - np.log(self.action_bound) - log_std
                - np.log(1.0 - t * t + _SQUASH_EPS)).sum(axis=1)

    def mean_action(self, states: np.ndarray) -> np.ndarray:
        mu, _ = self.distribution(states)
        return np.tanh(mu) * self.action_bound

    def act(self, state: np.ndarray, rng: np.random.Generator | None = None,
            deterministic: bool = False) -> np.ndarray:
        if deterministic or rng is None:
            return self.mean_action(state)[0]
        return self.sample(state, rng)[0][0]


def sample_action(policy: StochasticPolicy, state, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    action, log_prob = policy.sample(np.atleast_2d(state), rng)
    return action[0], float(log_prob[0])


# checkpoints ----------------------------------------------------------------

CKPT_HEADER = "cosbo-ckpt v1"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_checkpoint(path, net: Mlp | StochasticPolicy) -> None:
    policy = net if isinstance(net, StochasticPolicy) else None
    mlp = policy.trunk if policy else net
    lines = [CKPT_HEADER, "widths " + " ".join(str(w) for w in mlp.widths),
             "activations " + " ".join(mlp.activations)]
    if policy:
        lines.append(f"policy {policy.obs_dim} {policy.act_dim} {_fmt(policy.action_bound)}")
    lines += [_fmt(x) for x in mlp.flat()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> Mlp | StochasticPolicy:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != CKPT_HEADER:
        raise ValueError(f"{path}: missing '{CKPT_HEADER}' header")
    widths = [int(w) for w in lines[1].split()[1:]]
    activations = lines[2].split()[1:]
    body = 3
    policy_line = None
    if lines[3].startswith("policy "):
        policy_line = lines[3].split()[1:]
        body = 4
    mlp = Mlp(widths, activation=activations)
    mlp.load_flat(np.array([float(x) for x in lines[body:]]))
    if policy_line:
        obs_dim, act_dim, bound = int(policy_line[0]), int(policy_line[1]), float(policy_line[2])
        return StochasticPolicy(obs_dim, act_dim, bound, trunk=mlp)
    return mlp


def all_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)
