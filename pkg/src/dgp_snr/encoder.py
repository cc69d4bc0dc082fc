"""Amortized Gaussian variational distribution over per-point latents.

A fully connected network (two hidden layers of 20 tanh units, with the
input concatenated onto each layer's output before the next linear map)
produces a mean head and a pre-std head per data point.  The standard
deviation is softplus(pre_std - 3), so it starts small (~0.0486) when the
heads are zero-initialized.  A ``prior`` mode fixes q(z) = N(0, I) with no
trainable parameters at all.
"""

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .errors import InvalidMode, ShapeError
from .rng import TAG_INIT, substream

LEARNED = "learned"
FIXED_TO_PRIOR = "prior"

HIDDEN = 20
PRE_STD_SHIFT = -3.0

# fixed flattening order of the trainable parameters
_WEIGHT_NAMES = ("w1", "b1", "w2", "b2", "w_mean", "b_mean", "w_std", "b_std")


@dataclass(frozen=True)
class EncoderParams:
    mode: str
    input_dim: int
    latent_dim: int
    weights: dict | None           # name -> array; None in prior mode

    @classmethod
    def create(cls, input_dim, latent_dim=1, mode=LEARNED, seed=0):
        if mode == FIXED_TO_PRIOR:
            return cls(mode, input_dim, latent_dim, None)
        rng = substream(TAG_INIT, seed)

        def glorot(fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        d, h, dz = input_dim, HIDDEN, latent_dim
        weights = {
            "w1": glorot(d, h), "b1": np.zeros((1, h)),
            "w2": glorot(d + h, h), "b2": np.zeros((1, h)),
            "w_mean": glorot(d + 2 * h, dz), "b_mean": np.zeros((1, dz)),
            "w_std": glorot(d + 2 * h, dz), "b_std": np.zeros((1, dz)),
        }
        return cls(mode, input_dim, latent_dim, weights)

    @property
    def learned(self):
        return self.mode == LEARNED

    def num_params(self):
        if not self.learned:
            return 0
        return sum(self.weights[k].size for k in _WEIGHT_NAMES)

    def flat(self):
        if not self.learned:
            return np.zeros(0)
        return np.concatenate([self.weights[k].ravel() for k in _WEIGHT_NAMES])

    def with_flat(self, vec):
        """Rebuild parameters from a flat vector (same fixed order)."""
        if not self.learned:
            raise InvalidMode("prior-mode encoder has no parameters")
        out = {}
        i = 0
        for k in _WEIGHT_NAMES:
            size = self.weights[k].size
            out[k] = vec[i:i + size].reshape(self.weights[k].shape).copy()
            i += size
        return EncoderParams(self.mode, self.input_dim, self.latent_dim, out)


@dataclass(frozen=True)
class LatentDist:
    mu: np.ndarray                 # (N, Dz)
    sigma: np.ndarray              # (N, Dz), > 0


@dataclass
class EncoderNodes:
    """Tape view of the encoder; ``leaves`` is empty in prior mode."""

    params: EncoderParams
    nodes: dict
    leaves: dict

    def leaf_list(self):
        return [self.leaves[k] for k in _WEIGHT_NAMES] if self.leaves else []


def encoder_nodes(tape, params, trainable=True):
    if not params.learned:
        return EncoderNodes(params, {}, {})
    mk = tape.leaf if trainable else tape.constant
    nodes = {k: mk(params.weights[k]) for k in _WEIGHT_NAMES}
    leaves = dict(nodes) if trainable else {}
    return EncoderNodes(params, nodes, leaves)


def encode_nodes(tape, en, x):
    """Mean/std nodes of q(z|x) for a matrix of inputs."""
    n_rows = x.shape[0]
    dz = en.params.latent_dim
    if not en.params.learned:
        return (tape.constant(np.zeros((n_rows, dz))),
                tape.constant(np.ones((n_rows, dz))))
    w = en.nodes
    h1 = T.tanh(T.matmul(x, w["w1"]) + w["b1"])
    a2 = T.concat_cols([x, h1])
    h2 = T.tanh(T.matmul(a2, w["w2"]) + w["b2"])
    a3 = T.concat_cols([a2, h2])
    mu = T.matmul(a3, w["w_mean"]) + w["b_mean"]
    pre = T.matmul(a3, w["w_std"]) + w["b_std"]
    sigma = T.softplus(pre + PRE_STD_SHIFT)
    return mu, sigma


def encode(params, x):
    """Evaluate q(z|x) parameters for a matrix of inputs."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.input_dim:
        raise ShapeError(f"encoder expects {params.input_dim} columns")
    t = T.Tape()
    en = encoder_nodes(t, params, trainable=False)
    mu, sigma = encode_nodes(t, en, t.constant(x))
    return LatentDist(mu.value, sigma.value)


def sample_z(dist, eps):
    """Reparameterized draws mu + eps * sigma; eps has shape (N, K, Dz)."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim == 2:
        return dist.mu + eps * dist.sigma
    if eps.shape[0] != dist.mu.shape[0] or eps.shape[2] != dist.mu.shape[1]:
        raise ShapeError(f"eps {eps.shape} incompatible with {dist.mu.shape}")
    return dist.mu[:, None, :] + eps * dist.sigma[:, None, :]


def log_density(dist, z):
    """Per-sample log q(z); sums over the latent dimensions."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        mu, sigma = dist.mu, dist.sigma
    else:
        mu, sigma = dist.mu[:, None, :], dist.sigma[:, None, :]
    u = (z - mu) / sigma
    return np.sum(-0.5 * np.log(2.0 * np.pi) - np.log(sigma) - 0.5 * u * u,
                  axis=-1)
