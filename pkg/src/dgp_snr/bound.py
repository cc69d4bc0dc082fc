"""Partially-collapsed importance-weighted ELBO for latent-variable deep GPs.

The model composes L sparse GP layers on inputs augmented with a
per-point latent z ~ N(0, I).  The final layer's expectation is taken in
closed form for the Gaussian likelihood, so each importance weight is

    log w = log F + log p(z) - log q(z),

with log F the expected log-likelihood under the final layer's predictive
moments.  Everything stays in log space; weights are only combined
through log-sum-exp.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tape as T
from .encoder import (EncoderParams, LEARNED, encode, encoder_nodes,
                      encode_nodes, log_density)
from .errors import InvalidParameter, ShapeError
from .gp import (GpLayer, POSITIVE_FLOOR, init_inducing, kl_nodes, layer_nodes,
                 predict_nodes, principal_projection, sample_nodes, to_positive,
                 from_positive)
from .rng import TAG_BOUND, TAG_INIT, substream

LOG2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# model state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelState:
    """Ordered GP layers, amortized encoder, and likelihood noise."""

    layers: tuple
    encoder: EncoderParams
    noise_raw: np.ndarray          # (1, 1), softplus-parameterized

    def __post_init__(self):
        d_in = self.encoder.input_dim + self.encoder.latent_dim
        for i, layer in enumerate(self.layers):
            if layer.input_dim != d_in:
                raise ShapeError(
                    f"layer {i} expects {layer.input_dim} inputs, gets {d_in}")
            d_in = layer.width

    @property
    def noise_var(self):
        return float(to_positive(self.noise_raw)[0, 0])

    @property
    def latent_dim(self):
        return self.encoder.latent_dim

    @property
    def depth(self):
        return len(self.layers)

    @property
    def output_dim(self):
        return self.layers[-1].width

    @property
    def inner_widths(self):
        return [layer.width for layer in self.layers[:-1]]


def build_model(x, y, depth=2, width=5, num_inducing=128, latent_dim=1,
                encoder_mode=LEARNED, seed=0, noise_var=0.01):
    """Initialize a latent deep GP on (normalized) training data.

    Inducing inputs start at the data (or k-means centroids when the data
    outnumber them) with latent coordinates drawn standard normal; inner
    mean projections are frozen principal directions of the layer's
    mean-path inputs, and the final layer's projection is zero.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    d, p = x.shape[1], y.shape[1]
    rng = substream(TAG_INIT, seed, 0)

    h_repr = np.concatenate([x, rng.standard_normal((x.shape[0], latent_dim))],
                            axis=1)
    layers = []
    for ell in range(depth):
        final = ell == depth - 1
        w_out = p if final else width
        if ell == 0:
            zx = init_inducing(x, num_inducing, seed=rng)
            z_ind = np.concatenate(
                [zx, rng.standard_normal((zx.shape[0], latent_dim))], axis=1)
        else:
            z_ind = init_inducing(h_repr, num_inducing, seed=rng)
        proj = (np.zeros((h_repr.shape[1], w_out)) if final
                else principal_projection(h_repr, w_out))
        layers.append(GpLayer.create(z_ind, w_out, proj))
        h_repr = h_repr @ proj

    enc = EncoderParams.create(d, latent_dim, encoder_mode, seed)
    return ModelState(tuple(layers), enc,
                      from_positive(np.array([[noise_var]])))


# ---------------------------------------------------------------------------
# tape view of a model
# ---------------------------------------------------------------------------

class ModelGraph:
    """All trainable parameters of a model placed on one tape.

    ``natgrad_final=True`` exposes the final layer's (q_mean, L) directly
    so a natural-gradient step can consume their gradients; otherwise all
    q_sqrt diagonals are softplus-parameterized for plain gradient steps.
    """

    def __init__(self, model, trainable=True, natgrad_final=False):
        self.model = model
        self.tape = T.Tape()
        self.natgrad_final = natgrad_final
        self.layers = [
            layer_nodes(self.tape, layer, trainable=trainable,
                        natgrad=natgrad_final and i == model.depth - 1)
            for i, layer in enumerate(model.layers)
        ]
        self.enc = encoder_nodes(self.tape, model.encoder, trainable=trainable)
        if trainable:
            self.noise_leaf = self.tape.leaf(model.noise_raw)
        else:
            self.noise_leaf = self.tape.constant(model.noise_raw)
        self.noise_var = T.softplus(self.noise_leaf) + POSITIVE_FLOOR

    def phi_leaves(self):
        return self.enc.leaf_list()

    def param_groups(self):
        """name -> leaf maps for hyper / q_u / noise / phi groups."""
        hyper, q_u = {}, {}
        for i, ln in enumerate(self.layers):
            for name, leaf in ln.leaves.items():
                target = q_u if name.startswith("q_") else hyper
                target[f"layer{i}.{name}"] = leaf
        phi = {f"encoder.{k}": v for k, v in self.enc.leaves.items()}
        return {"hyper": hyper, "q_u": q_u,
                "noise": {"noise_raw": self.noise_leaf}, "phi": phi}

    def flat_phi_grad(self, grads):
        return np.concatenate(
            [grads[leaf].ravel() for leaf in self.phi_leaves()]) \
            if self.phi_leaves() else np.zeros(0)


# ---------------------------------------------------------------------------
# reparameterized draws
# ---------------------------------------------------------------------------

def point_eps(seed, n, m_samples, k_samples, latent_dim, inner_widths):
    """All standard-normal draws for one data point's (m, k) grid.

    Rows are ordered m-major, k-minor, matching the reshape used by the
    bound; the stream is a pure function of (seed, n).
    """
    g = substream(TAG_BOUND, seed, n)
    rows = m_samples * k_samples
    return {
        "z": g.standard_normal((rows, latent_dim)),
        "f": [g.standard_normal((rows, w)) for w in inner_widths],
    }


def stack_eps(eps_list):
    return {
        "z": np.concatenate([e["z"] for e in eps_list], axis=0),
        "f": [np.concatenate([e["f"][i] for e in eps_list], axis=0)
              for i in range(len(eps_list[0]["f"]))],
    }


# ---------------------------------------------------------------------------
# log-weight graphs
# ---------------------------------------------------------------------------

@dataclass
class WeightGraph:
    """Log-weight matrices plus the leaves a sampler refreshes per draw."""

    lw: dict                       # variant -> (B*M, K) node
    eps_z: object
    eps_f: list
    mu: object
    sigma: object
    logf: object
    batch: int
    m_samples: int
    k_samples: int

    def set_eps(self, eps):
        tape = self.eps_z.tape
        tape.set_leaf(self.eps_z, eps["z"])
        for leaf, val in zip(self.eps_f, eps["f"]):
            tape.set_leaf(leaf, val)


def weight_matrix_nodes(mg, xb, yb, m_samples, k_samples, eps,
                        variants=("full",)):
    """Build (B*M) x K log-weight matrices on the model graph's tape.

    ``variants`` selects which density treatments to materialize: "full"
    differentiates log q through both the sample path and the density
    parameters; "stopped" blocks the density parameters (the z path still
    differentiates), which is the surrogate the doubly reparameterized
    estimator needs; "omit" drops the -log q term entirely (diagnostic).
    All variants share the expected-log-likelihood computation.
    """
    tape = mg.tape
    xb = np.atleast_2d(np.asarray(xb, dtype=np.float64))
    yb = np.atleast_2d(np.asarray(yb, dtype=np.float64))
    batch = xb.shape[0]
    reps = m_samples * k_samples
    latent_dim = mg.model.latent_dim

    x_node = tape.constant(xb)
    y_rep = T.repeat_rows(tape.constant(yb), reps)
    eps_z = tape.leaf(eps["z"], param=False)
    eps_f = [tape.leaf(e, param=False) for e in eps["f"]]

    mu, sigma = encode_nodes(tape, mg.enc, x_node)
    mu_rep = T.repeat_rows(mu, reps)
    sigma_rep = T.repeat_rows(sigma, reps)
    z = mu_rep + eps_z * sigma_rep

    h = T.concat_cols([T.repeat_rows(x_node, reps), z])
    for i, ln in enumerate(mg.layers):
        mean, var, _ = predict_nodes(tape, ln, h)
        if i < mg.model.depth - 1:
            h = sample_nodes(mean, var, eps_f[i])

    p_out = yb.shape[1]
    log_noise = T.log(mg.noise_var) + LOG2PI            # log(2 pi sigma^2)
    quad = (T.square(y_rep - mean) + var).sum(axis=1)
    logf = log_noise * (-0.5 * p_out) - quad / (mg.noise_var * 2.0)
    logp = -0.5 * T.square(z).sum(axis=1) + (-0.5 * latent_dim * LOG2PI)

    lw = {}
    for variant in variants:
        if variant == "omit":
            rows = logf + logp
        else:
            if variant == "stopped":
                mu_d = T.stop_gradient(mu_rep)
                sigma_d = T.stop_gradient(sigma_rep)
            else:
                mu_d, sigma_d = mu_rep, sigma_rep
            u = (z - mu_d) / sigma_d
            logq = ((-0.5) * T.square(u) - T.log(sigma_d)).sum(axis=1) \
                + (-0.5 * latent_dim * LOG2PI)
            rows = logf + logp - logq
        lw[variant] = rows.reshape(batch * m_samples, k_samples)

    return WeightGraph(lw, eps_z, eps_f, mu, sigma, logf,
                       batch, m_samples, k_samples)


def elbo_from_weights(mg, wg, n_total, variant="full"):
    """(N/B) * sum_n mean_m [lse_k log w - log K] - sum_l KL_l."""
    lw = wg.lw[variant]
    per = T.logsumexp(lw, axis=1) + (-math.log(wg.k_samples))
    per_point = per.reshape(wg.batch, wg.m_samples).mean(axis=1)
    data_term = per_point.sum() * (n_total / wg.batch)
    kl = kl_nodes(mg.layers[0])
    for ln in mg.layers[1:]:
        kl = kl + kl_nodes(ln)
    return data_term - kl


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def expected_loglik(y, mean, var, noise_var):
    """Closed-form E_{f ~ N(mean, var)}[log N(y | f, noise_var I)]."""
    if noise_var <= 0.0:
        raise InvalidParameter("noise variance must be positive")
    y = np.asarray(y, dtype=np.float64).ravel()
    mean = np.asarray(mean, dtype=np.float64).ravel()
    var = np.asarray(var, dtype=np.float64).ravel()
    return float(np.sum(-0.5 * np.log(2.0 * np.pi * noise_var)
                        - ((y - mean) ** 2 + var) / (2.0 * noise_var)))


def log_weight(model, x_n, y_n, z, eps_f):
    """log w for one externally supplied draw (z, inner-layer noise)."""
    mg = ModelGraph(model, trainable=False)
    eps = {"z": np.zeros((1, model.latent_dim)),
           "f": [np.asarray(e, dtype=np.float64).reshape(1, -1)
                 for e in eps_f]}
    x = np.asarray(x_n, dtype=np.float64).reshape(1, -1)
    y = np.asarray(y_n, dtype=np.float64).reshape(1, -1)
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)

    dist = encode(model.encoder, x)
    # supply z through eps so the graph sees the exact requested draw
    eps["z"] = (z - dist.mu) / dist.sigma
    wg = weight_matrix_nodes(mg, x, y, 1, 1, eps)
    return float(wg.lw["full"].value[0, 0])


@dataclass(frozen=True)
class LogWeights:
    """Per-point log importance weights with the draws that produced them."""

    values: np.ndarray             # (M, K)
    z: np.ndarray                  # (M*K, latent_dim)
    eps_z: np.ndarray
    eps_f: list = field(default_factory=list)


def log_weights(model, x_n, y_n, m_samples, k_samples, seed, n=0):
    """Sample the (M, K) log-weight matrix for one data point."""
    eps = point_eps(seed, n, m_samples, k_samples, model.latent_dim,
                    model.inner_widths)
    mg = ModelGraph(model, trainable=False)
    wg = weight_matrix_nodes(mg, np.atleast_2d(x_n), np.atleast_2d(y_n),
                             m_samples, k_samples, eps)
    dist = encode(model.encoder, np.atleast_2d(x_n))
    z = dist.mu + eps["z"] * dist.sigma
    return LogWeights(wg.lw["full"].value.copy(), z, eps["z"], eps["f"])


def iwvi_elbo(model, x, y, batch_idx, n_total, k_samples, m_samples, seed):
    """Minibatch estimate of the importance-weighted bound.

    Deterministic given the seed: point n always consumes the substream
    derived from (seed, n), independent of batch composition.
    """
    if k_samples < 1 or m_samples < 1:
        raise InvalidParameter("K and M must be >= 1")
    batch_idx = np.asarray(batch_idx, dtype=int)
    if batch_idx.size == 0:
        raise InvalidParameter("empty batch")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))

    eps = stack_eps([point_eps(seed, int(n), m_samples, k_samples,
                               model.latent_dim, model.inner_widths)
                     for n in batch_idx])
    mg = ModelGraph(model, trainable=False)
    wg = weight_matrix_nodes(mg, x[batch_idx], y[batch_idx],
                             m_samples, k_samples, eps)
    return float(elbo_from_weights(mg, wg, n_total).value[0, 0])
