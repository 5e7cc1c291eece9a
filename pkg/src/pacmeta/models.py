"""Per-task empirical losses ``L(v, S)`` over flat parameter vectors.

A loss object is called as ``loss(v, x, y)`` with parameters ``v`` of shape
``(..., k)`` and data ``x: (..., m, d)``, ``y: (..., m)``; it returns the
per-task mean loss with shape ``(...)``.  Leading axes broadcast, so a batch
of tasks and a batch of parameter copies can be evaluated in one pass.
"""

from dataclasses import dataclass

import numpy as np

from pacmeta.autodiff import tensor as T
from pacmeta.autodiff.nn import MlpSpec, init_mlp, mlp_forward


@dataclass(frozen=True)
class RegressionMlp:
    """Squared loss of a tanh MLP regressor (default 1 -> 32 -> 32 -> 1)."""

    spec: MlpSpec = MlpSpec((1, 32, 32, 1))

    @property
    def n_params(self):
        return self.spec.n_params

    def init(self, rng):
        return init_mlp(self.spec, rng)

    def predict(self, v, x):
        out = mlp_forward(self.spec, v, x)
        return T.reshape(out, out.shape[:-1])

    def __call__(self, v, x, y):
        r = T.sub(self.predict(v, x), y)
        return T.mean(T.mul(r, r), axis=-1)

    def adapt_mask(self):
        return np.ones(self.n_params)


@dataclass(frozen=True)
class SoftmaxClassifier:
    """Softmax cross-entropy of an MLP body with a linear head.

    Only the head (last layer) is adapted per task; :meth:`adapt_mask`
    marks those coordinates.
    """

    n_way: int = 5
    hidden: tuple = (32, 32)
    input_dim: int = 2

    @property
    def spec(self):
        return MlpSpec((self.input_dim,) + tuple(self.hidden) + (self.n_way,))

    @property
    def n_params(self):
        return self.spec.n_params

    def init(self, rng):
        return init_mlp(self.spec, rng)

    def adapt_mask(self):
        mask = np.zeros(self.n_params)
        w, b, _, _ = self.spec.slices()[-1]
        mask[w.start:b.stop] = 1.0
        return mask

    def logits(self, v, x):
        return mlp_forward(self.spec, v, x)

    def __call__(self, v, x, y):
        logits = self.logits(v, x)
        onehot = np.eye(self.n_way)[np.asarray(y, dtype=int)]
        picked = T.tsum(T.mul(logits, onehot), axis=-1)
        return T.mean(T.sub(T.logsumexp(logits, axis=-1), picked), axis=-1)

    def accuracy(self, v, x, y):
        with T.no_grad():
            pred = np.argmax(self.logits(v, x).value, axis=-1)
        return np.mean(pred == np.asarray(y), axis=-1)


@dataclass(frozen=True)
class LinearGaussian:
    """Squared loss of a linear-in-parameters model ``h(x) = psi(x) . v``.

    Features are ``psi(x) = (x_0, ..., x_{d-1})`` optionally with a leading
    constant; with a Gaussian prior on ``v`` the Gibbs posterior is Gaussian.
    """

    dim: int = 2
    bias: bool = True

    @property
    def n_params(self):
        return self.dim

    def design(self, x):
        x = np.asarray(x)
        if self.bias:
            return np.concatenate([np.ones(x.shape[:-1] + (1,)), x], axis=-1)[..., :self.dim]
        return x[..., :self.dim]

    def predict(self, v, x):
        psi = self.design(x)                                  # (..., m, k)
        v = T.as_tensor(v)
        out = T.matmul(psi, T.reshape(v, v.shape + (1,)))
        return T.reshape(out, out.shape[:-1])

    def __call__(self, v, x, y):
        r = T.sub(self.predict(v, x), y)
        return T.mean(T.mul(r, r), axis=-1)

    def adapt_mask(self):
        return np.ones(self.n_params)


@dataclass(frozen=True)
class ZeroLoss:
    """``L == 0``; isolates the prior in sampler and gradient checks."""

    n_params: int = 2

    def __call__(self, v, x, y):
        v = T.as_tensor(v)
        return T.mul(T.tsum(v, axis=-1), 0.0)

    def adapt_mask(self):
        return np.ones(self.n_params)
