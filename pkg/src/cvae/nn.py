"""Dense-network numerical core.

Tensors are plain float64 ``numpy.ndarray`` objects. Gradients come from a
small reverse-mode tape (:class:`Tape`) whose operations carry hand-written
backward rules; :func:`gradient_check` compares them to central differences.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
PROB_EPS = 1e-7


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# layers and elementwise maps


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    use_bias: bool = True

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.weights.ndim != 2:
            raise DimensionError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}"
            )
        if not self.use_bias:
            self.bias[...] = 0.0

    @property
    def in_dim(self):
        return self.weights.shape[0]

    @property
    def out_dim(self):
        return self.weights.shape[1]

    @classmethod
    def he_init(cls, in_dim, out_dim, rng, use_bias=True):
        """He-normal weights (std ``sqrt(2/in_dim)``), zero bias."""
        weights = rng.standard_normal((in_dim, out_dim)) * np.sqrt(2.0 / in_dim)
        return cls(weights, np.zeros(out_dim), use_bias)

    @classmethod
    def zeros(cls, in_dim, out_dim, use_bias=True):
        return cls(np.zeros((in_dim, out_dim)), np.zeros(out_dim), use_bias)


def dense_forward(x, layer):
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise DimensionError(
            f"dense input shape {x.shape} incompatible with weights {layer.weights.shape}"
        )
    out = x @ layer.weights
    if layer.use_bias:
        out += layer.bias
    return out


def relu(x):
    return np.maximum(as_tensor(x), 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


# --------------------------------------------------------------------------
# diagonal Gaussians


@dataclass
class GaussianParams:
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.log_var = np.clip(as_tensor(self.log_var), LOG_VAR_MIN, LOG_VAR_MAX)
        _check_same_shape(self.mu, self.log_var, "GaussianParams")

    @property
    def shape(self):
        return self.mu.shape


def reparameterize(params, eps):
    eps = as_tensor(eps)
    _check_same_shape(params.mu, eps, "reparameterize epsilon")
    return params.mu + np.exp(0.5 * params.log_var) * eps


def kl_to_standard_normal(params):
    """Per-row ``KL(N(mu, exp(log_var)) || N(0, I))``."""
    mu, lv = params.mu, params.log_var
    terms = 1.0 + lv - mu * mu - np.exp(lv)
    kl = -0.5 * terms.sum(axis=-1)
    # tiny negative values are rounding noise around an exact zero
    return np.maximum(kl, 0.0)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(np.zeros_like(param), np.zeros_like(param), 0, learning_rate, beta1, beta2, epsilon)


def adam_step(param, grad, state):
    """Apply one bias-corrected Adam update in place; returns ``(param, state)``."""
    _check_same_shape(param, grad, "adam_step gradient")
    _check_same_shape(param, state.first_moment, "adam_step state")
    state.step_count += 1
    kernels.adam_update(
        param,
        np.ascontiguousarray(grad, dtype=np.float64),
        state.first_moment,
        state.second_moment,
        float(state.learning_rate),
        float(state.beta1),
        float(state.beta2),
        float(state.epsilon),
        state.step_count,
    )
    return param, state


# --------------------------------------------------------------------------
# reverse-mode tape


class Node:
    __slots__ = ("value", "grad", "requires_grad", "parents", "rules")

    def __init__(self, value, requires_grad, parents=(), rules=()):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.rules = rules

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Wengert list of operations; ``backward`` walks it in reverse.

    Every op records one backward rule per parent, ``rule(g) -> dparent``.
    Rules are skipped for parents that do not require gradients.
    """

    def __init__(self):
        self.nodes = []

    def _push(self, value, parents, rules):
        requires = any(p.requires_grad for p in parents)
        node = Node(value, requires, tuple(parents), tuple(rules))
        self.nodes.append(node)
        return node

    def leaf(self, value, requires_grad=True):
        node = Node(as_tensor(value), requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, value):
        return self.leaf(value, requires_grad=False)

    def backward(self, out):
        if out.value.size != 1:
            raise DimensionError(f"backward needs a scalar output, got shape {out.value.shape}")
        for node in self.nodes:
            node.grad = None
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes):
            if node.grad is None or not node.parents:
                continue
            for parent, rule in zip(node.parents, node.rules):
                if not parent.requires_grad:
                    continue
                g = rule(node.grad)
                parent.grad = g if parent.grad is None else parent.grad + g

    # ---- structural ops

    def dense(self, x, w, b=None):
        out = x.value @ w.value
        if b is None:
            return self._push(out, (x, w), (lambda g: g @ w.value.T, lambda g: x.value.T @ g))
        out = out + b.value
        return self._push(
            out,
            (x, w, b),
            (lambda g: g @ w.value.T, lambda g: x.value.T @ g, lambda g: g.sum(axis=0)),
        )

    def relu(self, x):
        mask = x.value > 0
        return self._push(np.where(mask, x.value, 0.0), (x,), (lambda g: g * mask,))

    def clip(self, x, lo, hi):
        inside = (x.value >= lo) & (x.value <= hi)
        return self._push(np.clip(x.value, lo, hi), (x,), (lambda g: g * inside,))

    def concat(self, a, b):
        k = a.value.shape[1]
        out = np.concatenate([a.value, b.value], axis=1)
        return self._push(out, (a, b), (lambda g: g[:, :k], lambda g: g[:, k:]))

    def sigmoid(self, x):
        p = sigmoid(x.value)
        return self._push(p, (x,), (lambda g: g * p * (1.0 - p),))

    # ---- Gaussian latent ops

    def reparameterize(self, mu, log_var, eps):
        std = np.exp(0.5 * log_var.value)
        return self._push(
            mu.value + std * eps,
            (mu, log_var),
            (lambda g: g, lambda g: g * eps * 0.5 * std),
        )

    def kl(self, mu, log_var):
        """Per-row KL to the standard normal; shape ``(batch,)``."""
        m, lv = mu.value, log_var.value
        e = np.exp(lv)
        val = -0.5 * (1.0 + lv - m * m - e).sum(axis=1)
        return self._push(
            val,
            (mu, log_var),
            (lambda g: g[:, None] * m, lambda g: g[:, None] * 0.5 * (e - 1.0)),
        )

    # ---- likelihood terms, per row

    def bernoulli_nll(self, logits, target):
        """Summed per-pixel cross-entropy of ``target`` under ``sigmoid(logits)``."""
        z = logits.value
        val = (softplus(z) - target * z).sum(axis=1)
        p = sigmoid(z)
        return self._push(val, (logits,), (lambda g: g[:, None] * (p - target),))

    def gaussian_nll(self, mean, target):
        """Unit-variance Gaussian: ``0.5 * ||mean - target||^2`` per row."""
        r = mean.value - target
        val = 0.5 * (r * r).sum(axis=1)
        return self._push(val, (mean,), (lambda g: g[:, None] * r,))

    def clamped_log_odds(self, logits):
        """``log(p / (1 - p))`` with ``p = clip(sigmoid(logits), eps, 1 - eps)``; column -> row vector."""
        z = logits.value[:, 0]
        p = np.clip(sigmoid(z), PROB_EPS, 1.0 - PROB_EPS)
        val = np.log(p) - np.log1p(-p)
        live = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
        return self._push(val, (logits,), (lambda g: (g * live)[:, None],))

    def binary_cross_entropy(self, logits, labels):
        """Row-wise BCE of a single-logit column against 0/1 ``labels`` (clamped probabilities)."""
        z = logits.value[:, 0]
        raw = sigmoid(z)
        p = np.clip(raw, PROB_EPS, 1.0 - PROB_EPS)
        val = -(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))
        live = (raw > PROB_EPS) & (raw < 1.0 - PROB_EPS)
        # d/dz of the clamped BCE: (p - y) where sigmoid is unclamped, else 0
        return self._push(val, (logits,), (lambda g: (g * live * (p - labels))[:, None],))

    # ---- reductions and arithmetic

    def mean(self, x):
        n = x.value.shape[0]
        return self._push(
            np.asarray(x.value.mean()), (x,), (lambda g: np.full(x.value.shape, float(g) / n),)
        )

    def weighted_sum(self, terms):
        """``sum(w * t)`` over ``(weight, scalar-node)`` pairs."""
        val = np.asarray(sum(w * float(t.value) for w, t in terms))
        parents = tuple(t for _, t in terms)
        rules = tuple((lambda g, w=w: g * w) for w, _ in terms)
        return self._push(val, parents, rules)


# --------------------------------------------------------------------------
# finite-difference gradient checker


def gradient_check(loss_fn, params, probe_count=20, h=1e-5, rng=None, floor=1e-6):
    """Largest relative gap between analytic and central-difference gradients.

    ``loss_fn(params) -> (loss, grads)`` where ``grads`` maps every key of
    ``params`` to an array of the same shape. ``probe_count`` coordinates are
    drawn per parameter tensor (all of them when the tensor is smaller).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NonFiniteError(f"loss is not finite at the base point: {loss}")
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        g = np.asarray(grads[name]).reshape(-1)
        if flat.size <= probe_count:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=probe_count, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up, _ = loss_fn(params)
            flat[i] = old - h
            down, _ = loss_fn(params)
            flat[i] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"loss not finite when probing {name}[{i}]")
            numeric = (up - down) / (2.0 * h)
            analytic = g[i]
            denom = max(abs(analytic), abs(numeric), floor)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
