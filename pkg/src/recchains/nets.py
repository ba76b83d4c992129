"""Generator networks, parameter initialization and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

HIDDEN_WIDTH = 200


@dataclass
class MLPParams:
    """Three dense layers, ReLU after the first two, linear output.

    Input is ``[embedding ; rating]`` (width ``k + 1``), output width ``k``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def k(self) -> int:
        return self.weights[-1].shape[1]

    def num_params(self) -> int:
        return int(sum(w.size for w in self.weights) + sum(b.size for b in self.biases))

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for n, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{n}"] = w
            out[f"{prefix}.b{n}"] = b
        return out


def mlp_param_count(k: int, hidden: int = HIDDEN_WIDTH) -> int:
    return (k + 1) * hidden + hidden + hidden * hidden + hidden + hidden * k + k


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def init_mlp(k: int, rng: np.random.Generator, hidden: int = HIDDEN_WIDTH) -> MLPParams:
    dims = [k + 1, hidden, hidden, k]
    weights = [glorot_uniform(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    return MLPParams(weights, biases)


def proto_rng(seed: int) -> np.random.Generator:
    """Stream for prototype / factor tables; shared with the PMF baseline so
    that an all-prototype model starts from the same tables."""
    return np.random.default_rng([seed, 1])


def init_tables(rng: np.random.Generator, num_users: int, num_items: int, k: int, sd: float = 0.1):
    u = rng.normal(0.0, sd, size=(num_users, k))
    v = rng.normal(0.0, sd, size=(num_items, k))
    return u, v


def init_params(k: int, seed: int, num_proto_users: int = 50, num_proto_items: int = 50, hidden: int = HIDDEN_WIDTH):
    """Return ``(phi, psi, user_protos, item_protos)``, deterministic per seed."""
    if k < 1:
        raise ValueError("k must be at least 1")
    net_rng = np.random.default_rng([seed, 0])
    phi = init_mlp(k, net_rng, hidden)
    psi = init_mlp(k, net_rng, hidden)
    u, v = init_tables(proto_rng(seed), num_proto_users, num_proto_items, k)
    return phi, psi, u, v


def mlp_forward(layers: list[tuple[ad.Tensor, ad.Tensor]], x: ad.Tensor) -> ad.Tensor:
    """Apply the net given its per-layer (weight, bias) tensors to rows of ``x``."""
    h = x
    last = len(layers) - 1
    for n, (w, b) in enumerate(layers):
        h = ad.linear(h, w, b)
        if n < last:
            h = ad.relu(h)
    return h


def mlp_leaves(tape: ad.Tape, params: MLPParams, prefix: str) -> list[tuple[ad.Tensor, ad.Tensor]]:
    return [
        (tape.leaf(w, f"{prefix}.w{n}"), tape.leaf(b, f"{prefix}.b{n}"))
        for n, (w, b) in enumerate(zip(params.weights, params.biases))
    ]


def mlp_apply(params: MLPParams, rating: float, embedding, tape: ad.Tape | None = None, prefix: str = "net") -> ad.Tensor:
    """Single-pair convenience form: map (rating, embedding) to a length-k vector."""
    if tape is None:
        tape = embedding.tape if isinstance(embedding, ad.Tensor) else ad.Tape()
    emb = embedding if isinstance(embedding, ad.Tensor) else tape.constant(embedding)
    k_in = params.weights[0].shape[0] - 1
    if emb.value.ndim != 1 or emb.shape[0] != k_in:
        raise ad.ShapeError(f"mlp_apply: embedding shape {emb.shape}, expected ({k_in},)")
    x = ad.concat([ad.reshape(emb, (1, k_in)), tape.constant([[rating]])], axis=1)
    out = mlp_forward(mlp_leaves(tape, params, prefix), x)
    return ad.reshape(out, (params.k,))


@dataclass
class Adam:
    """Adam with bias correction, updating named numpy arrays in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(state: Adam, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    state.step(params, grads)
