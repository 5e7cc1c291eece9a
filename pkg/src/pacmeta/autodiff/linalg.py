"""Cholesky-based Gaussian helpers on the tape."""

import math

import numpy as np

from pacmeta.autodiff import tensor as T


def cholesky_logdet(a):
    """Factor a symmetric matrix and return ``(L, logdet)``.

    ``L @ L.T`` equals ``A + jitter * I`` where the jitter escalation of
    :func:`pacmeta.autodiff.kernels.cholesky` applies; ``logdet`` is
    ``2 * sum(log(diag(L)))`` (batched over leading axes).
    """
    l, _ = T.cholesky(a)
    logdet = T.mul(T.tsum(T.log(T.diagonal(l)), axis=-1), 2.0)
    return l, logdet


def mvn_logpdf(y, mean, cov):
    """Log density of ``N(y | mean, cov)``; vectors on the last axis."""
    y, mean, cov = T.as_tensor(y), T.as_tensor(mean), T.as_tensor(cov)
    d = y.shape[-1]
    if mean.shape[-1] != d or cov.shape[-1] != d or cov.shape[-2] != d:
        raise ValueError(
            f"dimension mismatch: y {y.shape}, mean {mean.shape}, cov {cov.shape}")
    l, logdet = cholesky_logdet(cov)
    r = T.reshape(T.sub(y, mean), np.broadcast_shapes(y.shape, mean.shape) + (1,))
    z = T.solve_lower(l, r)
    maha = T.tsum(T.mul(z, z), axis=(-2, -1))
    return T.mul(T.add(T.add(maha, logdet), d * math.log(2 * math.pi)), -0.5)
