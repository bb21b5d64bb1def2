"""Dense tanh networks with exact backpropagation, Adam and categorical heads.

Layer ``i`` computes ``h_{i+1} = tanh(h_i W_i + b_i)``; the last layer is
linear. Weights are stored ``[fan_in x fan_out]`` as float64. Parameters are
exposed as a flat list ``[W_0, b_0, W_1, b_1, ...]`` which is also the order
of gradients and Adam moments.

Checkpoints are ``.npz`` archives (format version 1):

* ``meta``: JSON string with ``format_version``, ``config`` echo and free-form
  trainer fields (iteration counter, algorithm name).
* ``net/<name>/<i>``: i-th parameter array of network ``<name>``.
* ``adam/<name>/m/<i>``, ``adam/<name>/v/<i>``, ``adam/<name>/t``: optimiser state.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import log_softmax

from .errors import CheckpointError

logger = logging.getLogger(__name__)

HEAD_SIZES = (3, 4)
CHECKPOINT_FORMAT_VERSION = 1


def orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


class Mlp:
    """tanh hidden layers, linear output."""

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None,
                 hidden_gain: float = np.sqrt(2.0), head_gain: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("an Mlp needs at least input and output widths")
        self.sizes = tuple(int(s) for s in sizes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        last = len(self.sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes, self.sizes[1:])):
            gain = head_gain if i == last else hidden_gain
            self.weights.append(orthogonal(rng, fan_in, fan_out, gain))
            self.biases.append(np.zeros(fan_out))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params: Sequence[np.ndarray]):
        expected = [p.shape for p in self.params()]
        got = [np.shape(p) for p in params]
        if expected != got:
            raise ValueError(f"parameter shapes {got} do not match network {expected}")
        self.weights = [np.array(p, dtype=float) for p in params[0::2]]
        self.biases = [np.array(p, dtype=float) for p in params[1::2]]

    def copy(self) -> "Mlp":
        twin = Mlp.__new__(Mlp)
        twin.sizes = self.sizes
        twin.weights = [w.copy() for w in self.weights]
        twin.biases = [b.copy() for b in self.biases]
        return twin

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[-1]} does not match network input {self.sizes[0]}")
        return x

    def forward_cached(self, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Output plus the input of every layer, as needed by :meth:`backward`."""
        h = self._check_input(x)
        inputs = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            h = z if i == self.num_layers - 1 else np.tanh(z)
        return h, inputs

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def backward(self, x: np.ndarray, out_grad: np.ndarray,
                 inputs: Optional[List[np.ndarray]] = None) -> List[np.ndarray]:
        """Gradients of ``sum(out * out_grad)`` w.r.t. :meth:`params` (same order).

        Batched inputs accumulate over the batch.
        """
        if inputs is None:
            _, inputs = self.forward_cached(x)
        g = np.asarray(out_grad, dtype=float)
        grads: List[np.ndarray] = [np.empty(0)] * (2 * self.num_layers)
        for i in reversed(range(self.num_layers)):
            h = inputs[i]
            h2 = h if h.ndim > 1 else h[None]
            g2 = g if g.ndim > 1 else g[None]
            grads[2 * i] = h2.T @ g2
            grads[2 * i + 1] = g2.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * (1.0 - h**2)
        return grads


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward(net: Mlp, x: np.ndarray, out_grad: np.ndarray) -> List[np.ndarray]:
    return net.backward(x, out_grad)


def grad_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grads(grads: List[np.ndarray], max_norm: float) -> Tuple[List[np.ndarray], float]:
    norm = grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


class Adam:
    """Bias-corrected Adam, beta = (0.9, 0.999), eps = 1e-8."""

    def __init__(self, params: Sequence[np.ndarray], lr: float,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: List[np.ndarray], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Update ``params`` in place (descent direction) and return them."""
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_step(params: List[np.ndarray], grads: Sequence[np.ndarray], lr: float, state: Adam) -> List[np.ndarray]:
    state.lr = lr
    return state.step(params, grads)


# ------------------------------------------------------------------ heads


def split_heads(logits: np.ndarray, sizes: Sequence[int] = HEAD_SIZES) -> List[np.ndarray]:
    return np.split(np.atleast_2d(logits), np.cumsum(sizes)[:-1], axis=1)


class HeadEval(BaseModel):
    """Joint log-probability and entropy of a factored action, with head distributions."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    logprob: np.ndarray
    entropy: np.ndarray
    log_probs: List[np.ndarray]


def evaluate_heads(logits: np.ndarray, actions: np.ndarray, sizes: Sequence[int] = HEAD_SIZES) -> HeadEval:
    """log pi(a|o) summed over heads and total entropy, for actions ``[B x heads]``."""
    actions = np.atleast_2d(actions)
    logp = 0.0
    entropy = 0.0
    log_probs = []
    for j, z in enumerate(split_heads(logits, sizes)):
        lp = log_softmax(z, axis=1)
        log_probs.append(lp)
        logp = logp + np.take_along_axis(lp, actions[:, j:j + 1], axis=1)[:, 0]
        entropy = entropy - np.sum(np.exp(lp) * lp, axis=1)
    return HeadEval(logprob=np.asarray(logp), entropy=np.asarray(entropy), log_probs=log_probs)


def heads_grad(heval: HeadEval, actions: np.ndarray, d_logprob: np.ndarray, d_entropy: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the concatenated logits given upstream gradients on logprob and entropy."""
    actions = np.atleast_2d(actions)
    parts = []
    d_logprob = np.asarray(d_logprob, dtype=float)[:, None]
    d_entropy = np.asarray(d_entropy, dtype=float)[:, None]
    for j, lp in enumerate(heval.log_probs):
        p = np.exp(lp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, actions[:, j:j + 1], 1.0, axis=1)
        h = -np.sum(p * lp, axis=1, keepdims=True)
        parts.append(d_logprob * (onehot - p) + d_entropy * (-p * (lp + h)))
    return np.concatenate(parts, axis=1)


def sample_and_logprob(logits: np.ndarray, rng: np.random.Generator,
                       sizes: Sequence[int] = HEAD_SIZES) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample every head independently; returns (actions [B x heads], logprob, entropy)."""
    heads = split_heads(logits, sizes)
    actions = np.empty((heads[0].shape[0], len(heads)), dtype=int)
    for j, z in enumerate(heads):
        cdf = np.cumsum(np.exp(log_softmax(z, axis=1)), axis=1)
        u = rng.random(z.shape[0])[:, None]
        actions[:, j] = np.minimum((cdf < u).sum(axis=1), z.shape[1] - 1)
    heval = evaluate_heads(logits, actions, sizes)
    return actions, heval.logprob, heval.entropy


def greedy(logits: np.ndarray, sizes: Sequence[int] = HEAD_SIZES) -> np.ndarray:
    return np.stack([np.argmax(z, axis=1) for z in split_heads(logits, sizes)], axis=1)


# ------------------------------------------------------------- checkpoints


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    meta: dict
    networks: Dict[str, List[np.ndarray]]
    optimizers: Dict[str, Tuple[List[np.ndarray], List[np.ndarray], int]]


def save_checkpoint(path: Union[str, Path], networks: Dict[str, Mlp], optimizers: Dict[str, Adam],
                    meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {
        "meta": np.array(json.dumps({"format_version": CHECKPOINT_FORMAT_VERSION, **meta}, sort_keys=True)),
    }
    for name, net in networks.items():
        for i, p in enumerate(net.params()):
            arrays[f"net/{name}/{i}"] = p
    for name, opt in optimizers.items():
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"adam/{name}/m/{i}"] = m
            arrays[f"adam/{name}/v/{i}"] = v
        arrays[f"adam/{name}/t"] = np.array(opt.t)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info("Checkpoint written to %s", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {key: data[key] for key in data.files}
        meta = json.loads(str(arrays.pop("meta")))
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format_version')} in {path}")

    def indexed(prefix: str) -> List[np.ndarray]:
        keys = sorted((k for k in arrays if k.startswith(prefix) and k[len(prefix):].isdigit()),
                      key=lambda k: int(k[len(prefix):]))
        return [arrays[k] for k in keys]

    networks = {}
    optimizers = {}
    for key in arrays:
        kind, name = key.split("/")[:2]
        if kind == "net" and name not in networks:
            networks[name] = indexed(f"net/{name}/")
        elif kind == "adam" and name not in optimizers:
            optimizers[name] = (indexed(f"adam/{name}/m/"), indexed(f"adam/{name}/v/"),
                                int(arrays[f"adam/{name}/t"]))
    return Checkpoint(meta=meta, networks=networks, optimizers=optimizers)


def restore_network(net: Mlp, params: Sequence[np.ndarray], name: str):
    try:
        net.set_params(params)
    except ValueError as e:
        raise CheckpointError(f"checkpoint network '{name}' is incompatible: {e}") from e


def restore_optimizer(opt: Adam, state: Tuple[List[np.ndarray], List[np.ndarray], int], name: str):
    m, v, t = state
    if [x.shape for x in m] != [x.shape for x in opt.m]:
        raise CheckpointError(f"checkpoint optimiser '{name}' is incompatible")
    opt.m = [np.array(x, dtype=float) for x in m]
    opt.v = [np.array(x, dtype=float) for x in v]
    opt.t = t
