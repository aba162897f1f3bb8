"""Minimal dense policy/value networks with hand-written backprop.

Each network's parameters live in one flat float64 buffer; layer weights are
reshaped views into it, so optimizer updates, finite-difference probes and
checkpoint IO all operate on a single vector.  Gradients are exact
reverse-mode derivatives, validated against central finite differences in
the test suite.

Checkpoints are a JSON header (layer sizes, head type, seed, array table)
followed by flat little-endian float64 payloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .rngs import substream

_MAGIC = b"WDHRLCKPT1"


# ---------------------------------------------------------------------------
# Flat-buffer tanh MLP
# ---------------------------------------------------------------------------

class DenseStack:
    """tanh hidden layers with a linear output layer over one flat buffer.

    ``extra_blocks`` appends named parameter vectors (e.g. a state-independent
    log-std) to the same buffer; they do not participate in the forward pass
    and their gradient slots are filled by the owning head.
    """

    def __init__(self, sizes, seed, out_scale=0.01, extra_blocks=()):
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ConfigError(f"bad layer sizes {sizes}")
        self.sizes = tuple(int(s) for s in sizes)
        self.seed = seed
        self._specs = []  # (name, offset, shape)
        off = 0
        for i in range(len(self.sizes) - 1):
            fi, fo = self.sizes[i], self.sizes[i + 1]
            self._specs.append((f"W{i}", off, (fi, fo)))
            off += fi * fo
            self._specs.append((f"b{i}", off, (fo,)))
            off += fo
        for name, length in extra_blocks:
            self._specs.append((name, off, (int(length),)))
            off += int(length)
        self.n_params = off
        self.flat = np.zeros(off)
        rng = substream("net_init", seed, *self.sizes)
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            fi, fo = self.sizes[i], self.sizes[i + 1]
            a = np.sqrt(6.0 / (fi + fo))
            W = rng.uniform(-a, a, (fi, fo))
            if i == n_layers - 1:
                W *= out_scale
            self.view(f"W{i}")[:] = W

    def view(self, name) -> np.ndarray:
        for n, off, shape in self._specs:
            if n == name:
                return self.flat[off:off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def grad_view(self, grad_flat, name) -> np.ndarray:
        for n, off, shape in self._specs:
            if n == name:
                return grad_flat[off:off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, X):
        """Batched forward pass: (n, in) -> (n, out) plus activation cache."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.sizes[0]:
            raise ShapeError(
                f"expected input (n, {self.sizes[0]}), got {X.shape}")
        h = X
        cache = []
        for i in range(self.n_layers):
            z = h @ self.view(f"W{i}") + self.view(f"b{i}")
            cache.append((h, z))
            h = np.tanh(z) if i < self.n_layers - 1 else z
        return h, cache

    def backward(self, cache, d_out, grad_flat=None):
        """Exact gradient of sum(d_out * output) w.r.t. the flat buffer.

        Fills (or allocates) ``grad_flat``; extra blocks are left untouched.
        """
        if grad_flat is None:
            grad_flat = np.zeros(self.n_params)
        delta = np.asarray(d_out, dtype=float)
        for i in reversed(range(self.n_layers)):
            h_in, z = cache[i]
            if i < self.n_layers - 1:
                delta = delta * (1.0 - np.tanh(z) ** 2)
            self.grad_view(grad_flat, f"W{i}")[:] += h_in.T @ delta
            self.grad_view(grad_flat, f"b{i}")[:] += delta.sum(axis=0)
            delta = delta @ self.view(f"W{i}").T
        return grad_flat


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

@dataclass
class HeadOut:
    """Forward output of a policy: logits for categorical heads, mean and
    state-independent log_std for Gaussian heads."""

    kind: str
    logits: np.ndarray = None
    mean: np.ndarray = None
    log_std: np.ndarray = None

    @property
    def n(self) -> int:
        ref = self.logits if self.kind == "categorical" else self.mean
        return ref.shape[0]


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class PolicyNet:
    """Dense policy with a categorical or diagonal-Gaussian head.

    The Gaussian head's log-std is a learned state-independent vector stored
    in the same flat buffer as the layer weights.
    """

    LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0

    def __init__(self, obs_dim, action_dim, hidden=(64, 64), head="categorical",
                 seed=0, init_log_std=-0.5):
        if head not in ("categorical", "gaussian"):
            raise ConfigError(f"unknown head {head!r}")
        self.obs_dim = int(obs_dim)
        self.action_dim = int(action_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.head = head
        self.seed = seed
        self.init_log_std = float(init_log_std)
        extra = (("log_std", action_dim),) if head == "gaussian" else ()
        self.stack = DenseStack((obs_dim, *self.hidden, action_dim),
                                seed=seed, extra_blocks=extra)
        if head == "gaussian":
            self.stack.view("log_std")[:] = init_log_std

    # -- parameter plumbing --------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.stack.n_params

    def get_flat(self) -> np.ndarray:
        return self.stack.flat.copy()

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != self.stack.flat.shape:
            raise ShapeError(
                f"parameter vector shape {flat.shape} != {self.stack.flat.shape}")
        self.stack.flat[:] = flat

    # -- forward / sampling ---------------------------------------------------

    def forward(self, obs):
        out, cache = self.stack.forward(obs)
        if self.head == "categorical":
            return HeadOut(kind="categorical", logits=out), cache
        log_std = np.clip(self.stack.view("log_std"),
                          self.LOG_STD_MIN, self.LOG_STD_MAX)
        return HeadOut(kind="gaussian", mean=out, log_std=log_std.copy()), cache

    def probs(self, out: HeadOut):
        return np.exp(log_softmax(out.logits))

    def sample(self, out: HeadOut, rng):
        """Draw one action per row: inverse-CDF for categorical heads,
        mean + std * eps for Gaussian heads."""
        if self.head == "categorical":
            p = self.probs(out)
            u = rng.random(out.n)
            cdf = np.cumsum(p, axis=1)
            return (u[:, None] > cdf).sum(axis=1).astype(np.int64)
        eps = rng.standard_normal(out.mean.shape)
        return out.mean + np.exp(out.log_std) * eps

    def log_prob(self, out: HeadOut, actions):
        if self.head == "categorical":
            acts = np.asarray(actions)
            if acts.ndim == 2:  # one-hot rows
                acts = acts.argmax(axis=1)
            return log_softmax(out.logits)[np.arange(out.n), acts]
        a = np.asarray(actions, dtype=float)
        z = (a - out.mean) / np.exp(out.log_std)
        return -0.5 * (z ** 2 + 2.0 * out.log_std + np.log(2.0 * np.pi)).sum(axis=1)

    def entropy(self, out: HeadOut):
        if self.head == "categorical":
            logp = log_softmax(out.logits)
            return -(np.exp(logp) * logp).sum(axis=1)
        const = 0.5 * (1.0 + np.log(2.0 * np.pi))
        return np.full(out.n, float((out.log_std + const).sum()))

    # -- gradient helpers -----------------------------------------------------

    def log_prob_head_grads(self, out: HeadOut, actions, weights):
        """Gradient of sum_i weights[i] * log_prob_i w.r.t. the head outputs.

        Returns (d_netout, d_log_std); d_log_std is None for categorical.
        """
        w = np.asarray(weights, dtype=float)
        if self.head == "categorical":
            acts = np.asarray(actions)
            if acts.ndim == 2:
                acts = acts.argmax(axis=1)
            p = self.probs(out)
            onehot = np.zeros_like(p)
            onehot[np.arange(out.n), acts] = 1.0
            return w[:, None] * (onehot - p), None
        a = np.asarray(actions, dtype=float)
        var = np.exp(2.0 * out.log_std)
        d_mean = w[:, None] * (a - out.mean) / var
        d_log_std = (w[:, None] * (((a - out.mean) ** 2) / var - 1.0)).sum(axis=0)
        return d_mean, d_log_std

    def entropy_head_grads(self, out: HeadOut, weights):
        """Gradient of sum_i weights[i] * entropy_i w.r.t. the head outputs."""
        w = np.asarray(weights, dtype=float)
        if self.head == "categorical":
            logp = log_softmax(out.logits)
            p = np.exp(logp)
            H = -(p * logp).sum(axis=1, keepdims=True)
            return -w[:, None] * p * (logp + H), None
        return np.zeros_like(out.mean), np.full(self.action_dim, w.sum())

    def backward(self, cache, d_netout, d_log_std=None):
        """Flat-buffer gradient from head-output gradients."""
        grad = self.stack.backward(cache, d_netout)
        if self.head == "gaussian" and d_log_std is not None:
            self.stack.grad_view(grad, "log_std")[:] += d_log_std
        return grad

    # -- checkpoint io ---------------------------------------------------------

    def header(self) -> dict:
        return {"kind": "policy", "head": self.head, "obs_dim": self.obs_dim,
                "action_dim": self.action_dim, "hidden": list(self.hidden),
                "seed": self.seed, "init_log_std": self.init_log_std}

    def save(self, path):
        save_arrays(path, self.header(), {"params": self.stack.flat})

    @classmethod
    def load(cls, path) -> "PolicyNet":
        header, arrays = load_arrays(path)
        if header.get("kind") != "policy":
            raise ConfigError(f"{path} is not a policy checkpoint")
        net = cls(header["obs_dim"], header["action_dim"],
                  hidden=tuple(header["hidden"]), head=header["head"],
                  seed=header["seed"], init_log_std=header["init_log_std"])
        net.set_flat(arrays["params"])
        return net


class ValueNet:
    """Dense state-value estimator sharing the DenseStack plumbing."""

    def __init__(self, obs_dim, hidden=(64, 64), seed=0):
        self.obs_dim = int(obs_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = seed
        self.stack = DenseStack((obs_dim, *self.hidden, 1), seed=seed, out_scale=1.0)

    @property
    def n_params(self) -> int:
        return self.stack.n_params

    def get_flat(self) -> np.ndarray:
        return self.stack.flat.copy()

    def set_flat(self, flat):
        self.stack.flat[:] = np.asarray(flat, dtype=float)

    def forward(self, obs):
        out, cache = self.stack.forward(obs)
        return out[:, 0], cache

    def backward(self, cache, d_values):
        return self.stack.backward(cache, np.asarray(d_values, dtype=float)[:, None])

    def header(self) -> dict:
        return {"kind": "value", "obs_dim": self.obs_dim,
                "hidden": list(self.hidden), "seed": self.seed}

    def save(self, path):
        save_arrays(path, self.header(), {"params": self.stack.flat})

    @classmethod
    def load(cls, path) -> "ValueNet":
        header, arrays = load_arrays(path)
        if header.get("kind") != "value":
            raise ConfigError(f"{path} is not a value checkpoint")
        net = cls(header["obs_dim"], hidden=tuple(header["hidden"]), seed=header["seed"])
        net.set_flat(arrays["params"])
        return net


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction on a flat parameter vector.

    Non-finite gradients are rejected (no update; counted in ``rejected``).
    """

    def __init__(self, n_params, lr=3e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError(f"lr must be > 0, got {lr}")
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0
        self.rejected = 0

    def step(self, flat_params: np.ndarray, grad: np.ndarray) -> bool:
        """Apply one update in place; returns False on non-finite gradients."""
        grad = np.asarray(grad, dtype=float)
        if grad.shape != flat_params.shape:
            raise ShapeError(
                f"gradient shape {grad.shape} != parameters {flat_params.shape}")
        if not np.all(np.isfinite(grad)):
            self.rejected += 1
            return False
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        flat_params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return True

    def state_arrays(self) -> dict:
        return {"adam_m": self.m, "adam_v": self.v,
                "adam_t": np.array([float(self.t)])}

    def load_state_arrays(self, arrays: dict):
        self.m = arrays["adam_m"].copy()
        self.v = arrays["adam_v"].copy()
        self.t = int(arrays["adam_t"][0])


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def save_arrays(path, header: dict, arrays: dict):
    """Write named float64 arrays after a JSON header.

    Layout: magic, uint32 little-endian header length, UTF-8 JSON header
    (original fields plus an ``arrays`` table of name/offset/shape), then the
    concatenated array payloads as little-endian float64.
    """
    table = []
    off = 0
    payload = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "offset": off, "shape": list(arr.shape)})
        off += arr.size
        payload.append(arr.tobytes())
    full = dict(header)
    full["arrays"] = table
    blob = json.dumps(full, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.array([len(blob)], dtype="<u4").tobytes())
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def load_arrays(path):
    """Read a checkpoint written by ``save_arrays``: (header, arrays)."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ConfigError(f"{path} is not a checkpoint file")
        (hlen,) = np.frombuffer(fh.read(4), dtype="<u4")
        header = json.loads(fh.read(int(hlen)).decode())
        raw = fh.read()
    arrays = {}
    for entry in header.pop("arrays"):
        start = entry["offset"] * 8
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, arrays
