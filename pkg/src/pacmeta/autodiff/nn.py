"""Small tanh feed-forward networks over flat parameter vectors."""

from dataclasses import dataclass

import numpy as np

from pacmeta.autodiff import tensor as T


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output, e.g. ``(1, 32, 32, 1)``.

    Hidden layers use tanh; the output layer is linear.  Every layer has a
    weight matrix (stored row-major as ``in x out``) followed by a bias.
    """

    widths: tuple = (1, 32, 32, 1)
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"invalid widths {self.widths}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layers(self):
        return list(zip(self.widths[:-1], self.widths[1:]))

    @property
    def n_params(self):
        return sum(i * o + o for i, o in self.layers)

    def slices(self):
        """``(weight_slice, bias_slice, in, out)`` for each layer."""
        out, pos = [], 0
        for i, o in self.layers:
            w = slice(pos, pos + i * o)
            pos += i * o
            b = slice(pos, pos + o)
            pos += o
            out.append((w, b, i, o))
        return out


MEAN_NET = MlpSpec((1, 32, 32, 1))
FEATURE_NET = MlpSpec((1, 32, 32, 2))


def init_mlp(spec, rng):
    """Gaussian weights with variance ``1/fan_in``; zero biases."""
    theta = np.zeros(spec.n_params)
    for w, _, i, o in spec.slices():
        theta[w] = rng.normal(0.0, 1.0 / np.sqrt(i), size=i * o)
    return theta


def mlp_forward(spec, weights, x):
    """Evaluate the network.

    ``weights`` has shape ``(k,)`` or ``(..., k)`` for per-task parameter
    copies; ``x`` has shape ``(..., n, in)``.  Returns ``(..., n, out)``.
    """
    weights = T.as_tensor(weights)
    x = T.as_tensor(x)
    k = weights.shape[-1]
    if k != spec.n_params:
        raise ValueError(f"expected {spec.n_params} weights, got {k}")
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"expected input width {spec.widths[0]}, got {x.shape[-1]}")
    lead = weights.shape[:-1]
    h = x
    n_layers = len(spec.layers)
    for li, (ws, bs, i, o) in enumerate(spec.slices()):
        w = T.reshape(weights[..., ws], lead + (i, o))
        b = T.reshape(weights[..., bs], lead + (1, o))
        h = T.add(T.matmul(h, w), b)
        if li < n_layers - 1:
            h = T.tanh(h)
    return h
