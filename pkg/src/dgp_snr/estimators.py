"""Gradient estimators for the latent-variable variational parameters.

REG is the total reparameterized gradient of the log-average-weight: one
backward pass of mean_m[lse_k log w - log K], with gradients flowing
through both the z sample path and the log q density.  DREG rebuilds the
same quantity as a stop-gradient surrogate,

    sum_k sg(wbar_k^2) * log w_k,   wbar = softmax_k(sg(log w)),

with the density parameters blocked on their direct path, so backward()
reproduces the squared-normalized-weight path-derivative estimator
exactly.  Both estimators are unbiased for the same gradient; their
signal-to-noise ratios scale oppositely in K.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .bound import ModelGraph, elbo_from_weights, point_eps, stack_eps, \
    weight_matrix_nodes
from .errors import InvalidMode, InvalidParameter
from .rng import TAG_CALIBRATE, child_seed

KIND_REG = "reg"
KIND_DREG = "dreg"


@dataclass(frozen=True)
class GradSample:
    """One flat draw of a parameter-group gradient estimator."""

    values: np.ndarray
    n: int
    m_samples: int
    k_samples: int
    seed: int
    kind: str


def _dreg_surrogate(lw_stopped, m_samples, scale=None):
    sg = T.stop_gradient(lw_stopped)
    wbar = T.exp(sg - T.logsumexp(sg, axis=1))
    coeff = T.square(wbar)
    total = (coeff * lw_stopped).sum()
    return total * ((1.0 if scale is None else scale) / m_samples)


class PhiSampler:
    """Reusable single-point estimator graph.

    The graph is built once; each draw swaps the noise leaves, re-runs the
    forward sweep, and takes one backward pass, so Monte-Carlo studies pay
    no per-draw graph-construction cost.  Not thread-safe: concurrent
    workers each need their own sampler.
    """

    def __init__(self, model, x_n, y_n, m_samples, k_samples, kind,
                 point_index=0):
        if not model.encoder.learned:
            raise InvalidMode("phi estimators need a learned encoder")
        if kind not in (KIND_REG, KIND_DREG):
            raise InvalidParameter(f"unknown estimator kind {kind!r}")
        self.model = model
        self.kind = kind
        self.m_samples = m_samples
        self.k_samples = k_samples
        self.point_index = point_index
        self.mg = ModelGraph(model, trainable=True)

        eps = point_eps(0, point_index, m_samples, k_samples,
                        model.latent_dim, model.inner_widths)
        variant = "full" if kind == KIND_REG else "stopped"
        self.wg = weight_matrix_nodes(self.mg, np.atleast_2d(x_n),
                                      np.atleast_2d(y_n), m_samples,
                                      k_samples, eps, variants=(variant,))
        if kind == KIND_REG:
            per = T.logsumexp(self.wg.lw["full"], axis=1) \
                + (-math.log(k_samples))
            self.objective = per.mean(axis=0)
        else:
            self.objective = _dreg_surrogate(self.wg.lw["stopped"], m_samples)
        self.phi = self.mg.phi_leaves()

    def draw(self, seed):
        """One estimator draw as a flat phi vector, from substream (seed, n)."""
        eps = point_eps(seed, self.point_index, self.m_samples,
                        self.k_samples, self.model.latent_dim,
                        self.model.inner_widths)
        self.wg.set_eps(eps)
        self.mg.tape.recompute()
        grads = T.backward(self.mg.tape, self.objective, wrt=self.phi)
        return self.mg.flat_phi_grad(grads)


def reg_grad_phi(model, x_n, y_n, m_samples, k_samples, seed, point_index=0):
    """Reparameterization-gradient draw of the phi group (Monte Carlo)."""
    sampler = PhiSampler(model, x_n, y_n, m_samples, k_samples, KIND_REG,
                         point_index)
    return GradSample(sampler.draw(seed), point_index, m_samples, k_samples,
                      seed, KIND_REG)


def dreg_grad_phi(model, x_n, y_n, m_samples, k_samples, seed, point_index=0):
    """Doubly reparameterized draw of the phi group (Monte Carlo)."""
    sampler = PhiSampler(model, x_n, y_n, m_samples, k_samples, KIND_DREG,
                         point_index)
    return GradSample(sampler.draw(seed), point_index, m_samples, k_samples,
                      seed, KIND_DREG)


def _batch_grads(model, x, y, batch_idx, n_total, k_samples, m_samples, seed,
                 kind=KIND_REG, natgrad_final=False):
    """Gradient groups of the bound plus the graph and the bound's value."""
    batch_idx = np.asarray(batch_idx, dtype=int)
    if batch_idx.size == 0:
        raise InvalidParameter("empty batch")
    eps = stack_eps([point_eps(seed, int(n), m_samples, k_samples,
                               model.latent_dim, model.inner_widths)
                     for n in batch_idx])
    mg = ModelGraph(model, trainable=True, natgrad_final=natgrad_final)
    variants = ("full",) if kind == KIND_REG else ("full", "stopped")
    wg = weight_matrix_nodes(mg, np.atleast_2d(x)[batch_idx],
                             np.atleast_2d(y)[batch_idx], m_samples,
                             k_samples, eps, variants=variants)
    elbo = elbo_from_weights(mg, wg, n_total)
    grads = T.backward(mg.tape, elbo)

    groups = mg.param_groups()
    out = {gname: {pname: grads[leaf] for pname, leaf in leaves.items()}
           for gname, leaves in groups.items()}

    if kind == KIND_DREG and model.encoder.learned:
        surrogate = _dreg_surrogate(wg.lw["stopped"], m_samples,
                                    scale=n_total / batch_idx.size)
        phi_grads = T.backward(mg.tape, surrogate, wrt=mg.phi_leaves())
        out["phi"] = {f"encoder.{k}": phi_grads[leaf]
                      for k, leaf in mg.enc.leaves.items()}
    return out, mg, float(elbo.value[0, 0])


def full_grad(model, x, y, batch_idx, n_total, k_samples, m_samples, seed,
              kind=KIND_REG):
    """Bound-ascent gradients for every parameter group.

    Returns a map group name -> {param name -> gradient of the bound}.
    Under DREG only the phi block is replaced by the doubly reparameterized
    values (scaled like the bound's data term); all other blocks are the
    plain backward pass of the bound and are bit-identical between
    estimator kinds at a fixed seed.  In FixedToPrior mode the phi block
    is empty.
    """
    groups, _, _ = _batch_grads(model, x, y, batch_idx, n_total, k_samples,
                                m_samples, seed, kind=kind)
    return groups


# ---------------------------------------------------------------------------
# Condition-1 diagnostic: grad_phi E[w] = 0
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Condition1Result:
    mean: np.ndarray               # per-phi-component mean of grad Zhat
    se: np.ndarray                 # standard error of that mean
    passed: bool
    q_samples: int
    shift: float                   # the constant c used in exp(log w - c)


def condition1_check(model, x_n, y_n, q_samples, k_samples, seed,
                     omit_density=False):
    """Monte-Carlo test that the average importance weight has zero
    phi-gradient.

    Draws Q independent gradients of the shifted average weight
    (1/K) sum_k exp(log w_k - c).  The shift c is calibrated once from a
    dedicated substream and held constant across all Q draws, so the
    test statistic is an exact positive rescaling of grad Zhat and the
    pass rule |mean| <= 4 SE is unaffected by the guard.  With
    ``omit_density=True`` the -log q term is dropped from log w, which
    breaks the condition and should make the check fail (negative
    control).
    """
    if not model.encoder.learned:
        raise InvalidMode("condition-1 check needs a learned encoder")
    mg = ModelGraph(model, trainable=True)
    variant = "omit" if omit_density else "full"
    eps0 = point_eps(child_seed(TAG_CALIBRATE, seed), 0, 1, k_samples,
                     model.latent_dim, model.inner_widths)
    wg = weight_matrix_nodes(mg, np.atleast_2d(x_n), np.atleast_2d(y_n),
                             1, k_samples, eps0, variants=(variant,))
    shift = float(np.max(wg.lw[variant].value))
    zhat = T.exp(wg.lw[variant] + (-shift)).mean(axis=1)

    phi = mg.phi_leaves()
    dim = sum(leaf.value.size for leaf in phi)
    mean = np.zeros(dim)
    m2 = np.zeros(dim)
    for q in range(q_samples):
        eps = point_eps(child_seed(seed, q), 0, 1, k_samples,
                        model.latent_dim, model.inner_widths)
        wg.set_eps(eps)
        mg.tape.recompute()
        g = mg.flat_phi_grad(T.backward(mg.tape, zhat, wrt=phi))
        delta = g - mean
        mean += delta / (q + 1)
        m2 += delta * (g - mean)

    se = np.sqrt(m2 / max(q_samples - 1, 1)) / math.sqrt(q_samples)
    passed = bool(np.all(np.abs(mean) <= 4.0 * se))
    return Condition1Result(mean, se, passed, q_samples, shift)
