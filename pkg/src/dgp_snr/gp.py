"""Sparse variational GP layers with a whitened inducing-point posterior.

Each layer holds W independent GPs sharing an RBF-ARD kernel and a set of
inducing inputs, plus a frozen linear mean projection of the layer input.
The variational posterior over inducing values is whitened: q(v) =
N(m, L L^T) relative to the prior Cholesky, so its KL term is taken
against a standard normal and is independent of the inducing locations.

Layers are immutable during bound evaluation; optimizer steps build new
layer values.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrf

from . import tape as T
from .errors import InvalidParameter, NotPositiveDefinite, ShapeError, StepRejected

log = logging.getLogger(__name__)

POSITIVE_FLOOR = 1e-6
JITTERS = (1e-8, 1e-6, 1e-4)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    # inverse of log(1 + e^x); valid for y > 0
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def to_positive(raw):
    """Constrained value of a softplus-parameterized positive quantity."""
    return POSITIVE_FLOOR + softplus(raw)


def from_positive(value):
    value = np.asarray(value, dtype=np.float64)
    if np.any(value <= POSITIVE_FLOOR):
        raise InvalidParameter(f"positive parameter below floor {POSITIVE_FLOOR}")
    return softplus_inv(value - POSITIVE_FLOOR)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RbfArdParams:
    """RBF-ARD kernel parameters, stored pre-softplus."""

    lengthscales_raw: np.ndarray   # (1, D)
    variance_raw: np.ndarray       # (1, 1)

    @classmethod
    def create(cls, lengthscales, variance):
        ell = np.atleast_2d(np.asarray(lengthscales, dtype=np.float64))
        return cls(from_positive(ell),
                   from_positive(np.array([[float(variance)]])))

    @property
    def lengthscales(self):
        return to_positive(self.lengthscales_raw)

    @property
    def variance(self):
        return float(to_positive(self.variance_raw)[0, 0])

    @property
    def input_dim(self):
        return self.lengthscales_raw.shape[1]


@dataclass(frozen=True)
class GpLayer:
    """One sparse variational GP layer (W independent GPs)."""

    inducing_inputs: np.ndarray    # (M, D_in)
    q_mean: np.ndarray             # (M, W), whitened mean
    q_sqrt: np.ndarray             # (W, M, M), whitened lower Cholesky factors
    kernel: RbfArdParams
    mean_projection: np.ndarray    # (D_in, W), frozen

    @property
    def num_inducing(self):
        return self.inducing_inputs.shape[0]

    @property
    def input_dim(self):
        return self.inducing_inputs.shape[1]

    @property
    def width(self):
        return self.q_mean.shape[1]

    @classmethod
    def create(cls, inducing_inputs, width, mean_projection, lengthscales=None,
               variance=1.0):
        z = np.asarray(inducing_inputs, dtype=np.float64)
        m_ind, d_in = z.shape
        if lengthscales is None:
            lengthscales = np.full(d_in, np.sqrt(d_in))
        kernel = RbfArdParams.create(lengthscales, variance)
        q_mean = np.zeros((m_ind, width))
        q_sqrt = np.broadcast_to(np.eye(m_ind), (width, m_ind, m_ind)).copy()
        proj = np.asarray(mean_projection, dtype=np.float64)
        if proj.shape != (d_in, width):
            raise ShapeError(f"mean projection {proj.shape} != {(d_in, width)}")
        return cls(z, q_mean, q_sqrt, kernel, proj)


@dataclass(frozen=True)
class PredictiveMoments:
    mean: np.ndarray               # (N, W)
    var: np.ndarray                # (N, W), clamped at zero
    var_raw: np.ndarray            # (N, W), pre-clamp diagnostic


# ---------------------------------------------------------------------------
# value-level kernel and layer math (used by sampling-only paths)
# ---------------------------------------------------------------------------

def rbf_ard(x1, x2, params):
    """Gram matrix k(x, x') = variance * exp(-0.5 sum_d (dx_d / ell_d)^2)."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    ell = params.lengthscales
    if x1.shape[1] != ell.shape[1] or x2.shape[1] != ell.shape[1]:
        raise ShapeError(
            f"kernel inputs with {x1.shape[1]}/{x2.shape[1]} columns, "
            f"{ell.shape[1]} lengthscales")
    s1 = x1 / ell
    s2 = x2 / ell
    d2 = (np.sum(s1 * s1, axis=1)[:, None]
          - 2.0 * s1 @ s2.T
          + np.sum(s2 * s2, axis=1)[None, :])
    return params.variance * np.exp(-0.5 * d2)


def _chol_with_jitter(kzz):
    """Cholesky of kzz + jitter*I, escalating through the jitter ladder."""
    last = None
    for jit in JITTERS:
        c, info = dpotrf(kzz + jit * np.eye(kzz.shape[0]), lower=1, clean=1)
        if info == 0:
            if jit != JITTERS[0]:
                log.warning("inducing Gram needed jitter %.0e", jit)
            return c, jit
        last = info
    raise NotPositiveDefinite(last, f"inducing Gram not PD after jitter {JITTERS[-1]}")


def moments_np(layer, inputs):
    """Predictive mean/variance per output, plain numpy (no gradients)."""
    h = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    lzz, _ = _chol_with_jitter(rbf_ard(layer.inducing_inputs,
                                       layer.inducing_inputs, layer.kernel))
    kxz = rbf_ard(h, layer.inducing_inputs, layer.kernel)
    a = solve_triangular(lzz, kxz.T, lower=True, check_finite=False).T
    mean = h @ layer.mean_projection + a @ layer.q_mean
    var_raw = np.empty((h.shape[0], layer.width))
    prior = layer.kernel.variance - np.sum(a * a, axis=1)
    for w in range(layer.width):
        b = a @ layer.q_sqrt[w]
        var_raw[:, w] = prior + np.sum(b * b, axis=1)
    return PredictiveMoments(mean, np.maximum(var_raw, 0.0), var_raw)


def layer_predict(layer, inputs):
    """Predictive moments via the differentiable graph path."""
    t = T.Tape()
    ln = layer_nodes(t, layer, trainable=False)
    h = t.constant(np.atleast_2d(np.asarray(inputs, dtype=np.float64)))
    mean, var, var_raw = predict_nodes(t, ln, h)
    return PredictiveMoments(mean.value, var.value, var_raw.value)


def layer_sample(moments, eps):
    """mean + eps * sqrt(var); eps carries no gradient by construction."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != moments.mean.shape:
        raise ShapeError(f"eps {eps.shape} != moments {moments.mean.shape}")
    return moments.mean + eps * np.sqrt(moments.var)


def kl_whitened(q_mean, q_sqrt):
    """KL(N(m, LL^T) || N(0, I)) summed over the W factors."""
    q_mean = np.asarray(q_mean, dtype=np.float64)
    q_sqrt = np.asarray(q_sqrt, dtype=np.float64)
    if q_sqrt.ndim == 2:
        q_sqrt = q_sqrt[None]
    m_ind = q_mean.shape[0]
    total = 0.5 * np.sum(q_mean * q_mean)
    for w in range(q_sqrt.shape[0]):
        lw = q_sqrt[w]
        if np.any(np.triu(lw, 1) != 0.0):
            raise InvalidParameter("q_sqrt factor is not lower-triangular")
        diag = np.diag(lw)
        if np.any(diag <= 0.0):
            raise InvalidParameter("q_sqrt factor has a non-positive diagonal")
        total += 0.5 * (np.sum(lw * lw) - m_ind) - np.sum(np.log(diag))
    return float(total)


# ---------------------------------------------------------------------------
# graph-level construction
# ---------------------------------------------------------------------------

@dataclass
class LayerNodes:
    """Tape view of one layer: raw leaves plus constrained value nodes."""

    inducing: object
    lengthscales: object
    variance: object
    q_mean: object
    q_sqrt: list
    mean_projection: object
    leaves: dict                   # name -> leaf node (adam-space params)
    natgrad_leaves: tuple | None   # (q_mean leaf, [L_w leaves]) when natgrad


def layer_nodes(tape, layer, trainable=True, natgrad=False):
    """Put a layer on a tape.

    ``natgrad=True`` exposes the constrained (q_mean, L_w) directly as
    leaves (the natural-gradient step owns positive-definiteness);
    otherwise q_sqrt diagonals are softplus-parameterized so any gradient
    step keeps them positive.
    """
    mk = tape.leaf if trainable else tape.constant

    leaves = {}
    z = mk(layer.inducing_inputs)
    ell_raw = mk(layer.kernel.lengthscales_raw)
    var_raw = mk(layer.kernel.variance_raw)
    if trainable:
        leaves["inducing"] = z
        leaves["lengthscales_raw"] = ell_raw
        leaves["variance_raw"] = var_raw
    ell = T.softplus(ell_raw) + POSITIVE_FLOOR
    variance = T.softplus(var_raw) + POSITIVE_FLOOR

    q_mean = mk(layer.q_mean)
    if trainable:
        leaves["q_mean"] = q_mean

    q_sqrt = []
    natgrad_l = []
    for w in range(layer.width):
        lw_val = layer.q_sqrt[w]
        if natgrad and trainable:
            leaf = tape.leaf(lw_val)
            leaves[f"q_sqrt_{w}"] = leaf
            lw = T.tril(leaf)
            natgrad_l.append(leaf)
        else:
            raw_val = (np.tril(lw_val, -1)
                       + np.diag(from_positive(np.diag(lw_val))))
            leaf = mk(raw_val)
            if trainable:
                leaves[f"q_sqrt_{w}"] = leaf
            lw = (T.tril(leaf, -1)
                  + T.diag_embed(T.softplus(T.diag_part(leaf)) + POSITIVE_FLOOR))
        q_sqrt.append(lw)

    proj = tape.constant(layer.mean_projection)
    ng = (q_mean, natgrad_l) if natgrad and trainable else None
    return LayerNodes(z, ell, variance, q_mean, q_sqrt, proj, leaves, ng)


def gram_nodes(ln, x1, x2):
    """RBF-ARD Gram matrix between two node inputs."""
    s1 = x1 / ln.lengthscales
    s2 = s1 if x2 is x1 else x2 / ln.lengthscales
    sq1 = T.square(s1).sum(axis=1)
    sq2 = sq1 if x2 is x1 else T.square(s2).sum(axis=1)
    d2 = sq1 + T.transpose(sq2) - 2.0 * T.matmul(s1, T.transpose(s2))
    return ln.variance * T.exp(-0.5 * d2)


def predict_nodes(tape, ln, h):
    """Whitened sparse-GP predictive moments at node inputs ``h``.

    Returns (mean, var, var_raw) nodes; var is clamped at zero.
    """
    kzz = gram_nodes(ln, ln.inducing, ln.inducing)
    m_ind = kzz.shape[0]
    lzz = None
    for jit in JITTERS:
        try:
            lzz = T.cholesky(kzz + tape.constant(jit * np.eye(m_ind)))
            if jit != JITTERS[0]:
                log.warning("inducing Gram needed jitter %.0e", jit)
            break
        except NotPositiveDefinite as err:
            pivot = err.pivot
    if lzz is None:
        raise NotPositiveDefinite(
            pivot, f"inducing Gram not PD after jitter {JITTERS[-1]}")

    kxz = gram_nodes(ln, h, ln.inducing)
    a = T.transpose(T.tri_solve(lzz, T.transpose(kxz)))     # Kxz Lzz^{-T}
    mean = T.matmul(h, ln.mean_projection) + T.matmul(a, ln.q_mean)

    width = ln.q_mean.shape[1]
    prior = ln.variance - T.square(a).sum(axis=1)           # (N, 1)
    cols = []
    for lw in ln.q_sqrt:
        b = T.matmul(a, lw)
        cols.append(T.square(b).sum(axis=1))
    var_raw = T.broadcast_to(prior, (h.shape[0], width)) + T.concat_cols(cols)
    return mean, T.clip_min(var_raw, 0.0), var_raw


def sample_nodes(mean, var, eps):
    """Reparameterized layer draw: mean + eps * sqrt(var)."""
    return mean + eps * T.sqrt(var)


def kl_nodes(ln):
    """Whitened KL term of one layer as a scalar node."""
    m_ind = ln.q_mean.shape[0]
    width = ln.q_mean.shape[1]
    total = 0.5 * T.square(ln.q_mean).sum()
    for lw in ln.q_sqrt:
        total = total + 0.5 * T.square(lw).sum() - T.log(T.diag_part(lw)).sum()
    return total - 0.5 * m_ind * width


# ---------------------------------------------------------------------------
# natural-gradient step for the whitened Gaussian q(v)
# ---------------------------------------------------------------------------

def expectation_grads(m, lmat, g_m, g_l):
    """Gradients w.r.t. expectation parameters (m, S + m m^T).

    Converts loss gradients taken w.r.t. the mean and the lower Cholesky
    factor into gradients w.r.t. the Gaussian expectation parameters, by
    differentiating the map (eta1, eta2) -> (m, chol(eta2 - eta1 eta1^T))
    on a scratch tape.  g_eta2 is returned in its symmetric convention.
    """
    m = m.reshape(-1, 1)
    t = T.Tape()
    eta1 = t.leaf(m)
    eta2 = t.leaf(lmat @ lmat.T + m @ m.T)
    s_node = eta2 - T.matmul(eta1, T.transpose(eta1))
    l_node = T.cholesky(s_node)
    scal = ((t.constant(g_m.reshape(-1, 1)) * eta1).sum()
            + (t.constant(np.tril(g_l)) * l_node).sum())
    grads = T.backward(t, scal, wrt=[eta1, eta2])
    g1 = grads[eta1]
    g2 = grads[eta2]
    return g1, 0.5 * (g2 + g2.T)


def _natural_params(m, lmat):
    s_inv = cho_solve((lmat, True), np.eye(lmat.shape[0]))
    return s_inv @ m, -0.5 * s_inv


def natgrad_step(layer, eta_grads, step):
    """One natural-gradient descent step on (q_mean, q_sqrt).

    ``eta_grads`` is a list of (g_eta1, g_eta2) pairs, one per GP output,
    holding loss gradients w.r.t. the expectation parameters.  The update
    theta <- theta - step * dL/d(eta) runs in natural-parameter space; if
    the precision leaves the negative-definite cone the step is halved,
    up to 10 times, before StepRejected is raised.
    """
    if step < 0:
        raise InvalidParameter("natgrad step must be >= 0")
    if step == 0:
        return layer

    width = layer.width
    new_mean = np.empty_like(layer.q_mean)
    new_sqrt = np.empty_like(layer.q_sqrt)
    for w in range(width):
        m = layer.q_mean[:, w:w + 1]
        lmat = layer.q_sqrt[w]
        g1, g2 = eta_grads[w]
        theta1, theta2 = _natural_params(m, lmat)

        trial = step
        for _ in range(11):
            t1 = theta1 - trial * g1.reshape(-1, 1)
            t2 = theta2 - trial * g2
            prec = -(t2 + t2.T)                    # = S^{-1}, symmetrized
            c, info = dpotrf(prec, lower=1, clean=1)
            if info == 0:
                s_new = cho_solve((c, True), np.eye(prec.shape[0]))
                s_new = 0.5 * (s_new + s_new.T)
                c2, info2 = dpotrf(s_new, lower=1, clean=1)
                if info2 == 0:
                    new_mean[:, w] = (s_new @ t1)[:, 0]
                    new_sqrt[w] = c2
                    break
            trial *= 0.5
        else:
            raise StepRejected(
                f"natural-gradient step rejected for output {w} "
                f"after 10 halvings (initial step {step})")
    return replace(layer, q_mean=new_mean, q_sqrt=new_sqrt)


# ---------------------------------------------------------------------------
# initialization helpers
# ---------------------------------------------------------------------------

def principal_projection(data, width):
    """Top principal directions of ``data`` as projection columns.

    Columns beyond the available rank cycle through identity columns, so
    narrow inputs still produce a full-width frozen mean projection.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    d_in = data.shape[1]
    centered = data - data.mean(axis=0, keepdims=True)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(svals > 1e-10 * (svals[0] if svals.size else 1.0)))
    proj = np.zeros((d_in, width))
    for w in range(width):
        if w < rank:
            proj[:, w] = vt[w]
        else:
            proj[w % d_in, w] = 1.0
    return proj


def init_inducing(data, num_inducing, seed):
    """Inducing inputs: the data itself when small, else k-means centroids."""
    from scipy.cluster.vq import kmeans2

    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] <= num_inducing:
        return data.copy()
    centroids, _ = kmeans2(data, num_inducing, minit="points", seed=seed)
    return centroids
