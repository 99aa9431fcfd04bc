"""Small fully-connected networks with explicit forward/backward passes.

Hidden layers use ReLU, the last layer is linear.  Weights are
He-style uniform in +-sqrt(6 / fan_in), biases start at zero; a network
can zero its output layer so the field it parameterizes starts at
exactly zero.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


class MLP:
    """Affine+ReLU stack; ``weights[i]`` has shape (out_i, in_i)."""

    def __init__(self, weights, biases):
        self.weights = list(weights)
        self.biases = list(biases)
        for W, b in zip(self.weights, self.biases):
            if W.shape[0] != b.shape[0]:
                raise ConfigError(f"bias shape {b.shape} does not match weight {W.shape}")

    @classmethod
    def create(cls, sizes, rng: np.random.Generator, dtype=np.float32,
               zero_last_layer: bool = False) -> "MLP":
        """sizes: (in, hidden..., out)."""
        if len(sizes) < 2:
            raise ConfigError("an MLP needs at least input and output sizes")
        weights, biases = [], []
        for i, (nin, nout) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / nin)
            W = rng.uniform(-bound, bound, size=(nout, nin)).astype(dtype)
            if zero_last_layer and i == len(sizes) - 2:
                W = np.zeros_like(W)
            weights.append(W)
            biases.append(np.zeros(nout, dtype=dtype))
        return cls(weights, biases)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self):
        """Flat list alternating W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out


def mlp_fwd(m: MLP, x: np.ndarray):
    """Forward pass; returns (output, cache of layer inputs)."""
    x = np.asarray(x)
    if x.shape[-1] != m.in_dim:
        raise ConfigError(f"MLP expects input width {m.in_dim}, got {x.shape[-1]}")
    acts = [x]
    h = x
    last = m.n_layers - 1
    for i, (W, b) in enumerate(zip(m.weights, m.biases)):
        h = h @ W.T + b
        if i != last:
            h = np.maximum(h, 0.0)
            acts.append(h)
    return h, acts


def mlp_forward(m: MLP, x: np.ndarray) -> np.ndarray:
    return mlp_fwd(m, x)[0]


def mlp_bwd(m: MLP, cache, upstream: np.ndarray):
    """Backward pass; returns (param grads aligned with m.params(), dx).

    upstream: gradient with respect to the output, same shape as output.
    """
    grads = [None] * (2 * m.n_layers)
    g = np.asarray(upstream)
    for i in range(m.n_layers - 1, -1, -1):
        a = cache[i]
        grads[2 * i] = g.reshape(-1, g.shape[-1]).T @ a.reshape(-1, a.shape[-1])
        grads[2 * i + 1] = g.reshape(-1, g.shape[-1]).sum(axis=0)
        g = g @ m.weights[i]
        if i > 0:
            g = g * (a > 0)
    return grads, g
