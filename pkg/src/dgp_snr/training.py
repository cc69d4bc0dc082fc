"""Training loop, Monte-Carlo evaluation, and paired comparison utilities.

Every parameter group except the final layer's q(u) takes Adam steps on
its raw (unconstrained) storage; the final layer's q(u) takes natural
gradient steps in its Gaussian natural parameters.  Both learning rates
anneal by a fixed factor every ``anneal_every`` iterations, as a step
function.  A run is a pure function of (model, data, config): batches,
reparameterization draws, and evaluation draws all come from counter-based
substreams.
"""

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm, rankdata

from .bound import ModelState
from .encoder import EncoderParams
from .errors import InvalidParameter, NotPositiveDefinite, Undefined
from .estimators import KIND_DREG, KIND_REG, _batch_grads
from .gp import (GpLayer, RbfArdParams, expectation_grads, from_positive,
                 moments_np, natgrad_step, to_positive)
from .rng import TAG_BATCH, TAG_EVAL, child_seed, substream

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    batch_size: int = 64
    k_samples: int = 5
    m_samples: int = 1
    adam_lr: float = 0.005
    natgrad_lr: float = 0.01
    anneal: float = 0.98
    anneal_every: int = 1000
    estimator: str = KIND_REG
    seed: int = 0
    trace_every: int = 100

    def __post_init__(self):
        if self.adam_lr <= 0 or self.natgrad_lr <= 0:
            raise InvalidParameter("learning rates must be positive")
        if not 0.0 < self.anneal <= 1.0:
            raise InvalidParameter("anneal factor must lie in (0, 1]")
        if self.estimator not in (KIND_REG, KIND_DREG):
            raise InvalidParameter(f"unknown estimator {self.estimator!r}")
        if self.iterations < 0 or self.batch_size < 1:
            raise InvalidParameter("bad iteration or batch count")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    elbo: float
    adam_lr: float
    natgrad_lr: float
    wall_clock: float


@dataclass(frozen=True)
class TrainTrace:
    rows: tuple

    def iterations(self):
        return [r.iteration for r in self.rows]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One Adam descent step over a dict of named arrays."""
    t = state.t + 1
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        m = ADAM_BETA1 * state.m.get(name, 0.0) + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v.get(name, 0.0) + (1.0 - ADAM_BETA2) * g * g
        new_params[name] = value - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(t, new_m, new_v)


def annealed_lr(base, iteration, factor, every):
    """Step-annealed rate: base * factor^(iteration // every)."""
    return base * factor ** (iteration // every)


# ---------------------------------------------------------------------------
# model reassembly after an optimizer step
# ---------------------------------------------------------------------------

def _layer_from_values(layer, vals, prefix, natgrad_layer=None):
    kernel = RbfArdParams(vals[f"{prefix}.lengthscales_raw"],
                          vals[f"{prefix}.variance_raw"])
    base = natgrad_layer if natgrad_layer is not None else layer
    if natgrad_layer is None:
        q_mean = vals[f"{prefix}.q_mean"]
        q_sqrt = np.empty_like(layer.q_sqrt)
        for w in range(layer.width):
            raw = vals[f"{prefix}.q_sqrt_{w}"]
            q_sqrt[w] = np.tril(raw, -1) + np.diag(to_positive(np.diag(raw)))
        base = replace(base, q_mean=q_mean, q_sqrt=q_sqrt)
    return replace(base, inducing_inputs=vals[f"{prefix}.inducing"],
                   kernel=kernel)


def train(model, x, y, config):
    """Optimize the bound; returns (model, TrainTrace), bitwise reproducible.

    Each iteration samples a batch without replacement, takes the
    estimator's gradients of the bound, applies Adam to every group except
    the final layer's q(u), and a natural-gradient step to that one.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    n_total = x.shape[0]
    depth = model.depth
    final_q = {f"layer{depth - 1}.q_mean"} | \
        {f"layer{depth - 1}.q_sqrt_{w}" for w in range(model.output_dim)}

    adam_state = AdamState()
    rows = []
    started = time.monotonic()
    last_elbo = float("nan")

    for it in range(config.iterations):
        adam_lr = annealed_lr(config.adam_lr, it, config.anneal,
                              config.anneal_every)
        nat_lr = annealed_lr(config.natgrad_lr, it, config.anneal,
                             config.anneal_every)
        bsize = min(config.batch_size, n_total)
        batch = np.sort(substream(TAG_BATCH, config.seed, it)
                        .choice(n_total, size=bsize, replace=False))
        try:
            groups, mg, elbo_val = _batch_grads(
                model, x, y, batch, n_total, config.k_samples,
                config.m_samples, child_seed(config.seed, it),
                kind=config.estimator, natgrad_final=True)
        except NotPositiveDefinite as err:
            raise NotPositiveDefinite(
                err.pivot, f"training iteration {it}: {err}") from err
        last_elbo = elbo_val

        # Adam on everything except the final layer's q(u); gradients are of
        # the bound, so descend on their negation.
        leaf_map = mg.param_groups()
        params, grads = {}, {}
        for gname, leaves in leaf_map.items():
            for pname, leaf in leaves.items():
                if pname in final_q:
                    continue
                params[pname] = leaf.value
                grads[pname] = -groups[gname][pname]
        new_vals, adam_state = adam_step(params, grads, adam_state, adam_lr)

        # natural-gradient step on the final layer's whitened q(u)
        final = model.layers[-1]
        g_mean = groups["q_u"][f"layer{depth - 1}.q_mean"]
        etas = []
        for w in range(final.width):
            g_l = groups["q_u"][f"layer{depth - 1}.q_sqrt_{w}"]
            etas.append(expectation_grads(final.q_mean[:, w], final.q_sqrt[w],
                                          -g_mean[:, w], -g_l))
        new_final = natgrad_step(final, etas, nat_lr)

        layers = [
            _layer_from_values(layer, new_vals, f"layer{i}",
                               natgrad_layer=new_final if i == depth - 1
                               else None)
            for i, layer in enumerate(model.layers)
        ]
        if model.encoder.learned:
            enc_w = {k: new_vals[f"encoder.{k}"]
                     for k in model.encoder.weights}
            encoder = EncoderParams(model.encoder.mode,
                                    model.encoder.input_dim,
                                    model.encoder.latent_dim, enc_w)
        else:
            encoder = model.encoder
        model = ModelState(tuple(layers), encoder, new_vals["noise_raw"])

        if it % config.trace_every == 0:
            rows.append(TraceRow(it, last_elbo, adam_lr, nat_lr,
                                 time.monotonic() - started))

    rows.append(TraceRow(config.iterations, last_elbo,
                         annealed_lr(config.adam_lr, config.iterations,
                                     config.anneal, config.anneal_every),
                         annealed_lr(config.natgrad_lr, config.iterations,
                                     config.anneal, config.anneal_every),
                         time.monotonic() - started))
    return model, TrainTrace(tuple(rows))


# ---------------------------------------------------------------------------
# Monte-Carlo evaluation with prior latents
# ---------------------------------------------------------------------------

def _propagate_prior(model, x_row, s_samples, gen):
    """Sample s function values at one input with z from the prior."""
    z = gen.standard_normal((s_samples, model.latent_dim))
    h = np.concatenate([np.repeat(x_row.reshape(1, -1), s_samples, axis=0), z],
                       axis=1)
    for layer in model.layers:
        mom = moments_np(layer, h)
        eps = gen.standard_normal(mom.mean.shape)
        h = mom.mean + eps * np.sqrt(mom.var)
    return h                                            # (S, P)


def test_loglik(model, x_test, y_test, s_samples=10000, seed=0,
                loglik_offset=0.0):
    """Per-point log[(1/S) sum_s N(y | f_s, sigma^2)] and its mean.

    z is drawn from the prior and f is sampled through every layer; the
    average runs through log-sum-exp.  ``loglik_offset`` is subtracted per
    point to report in original units after normalization.
    """
    if s_samples < 1:
        raise InvalidParameter("S must be >= 1")
    x_test = np.atleast_2d(np.asarray(x_test, dtype=np.float64))
    y_test = np.atleast_2d(np.asarray(y_test, dtype=np.float64))
    noise = model.noise_var
    const = -0.5 * y_test.shape[1] * math.log(2.0 * math.pi * noise)
    per_point = np.empty(x_test.shape[0])
    for n in range(x_test.shape[0]):
        f = _propagate_prior(model, x_test[n], s_samples,
                             substream(TAG_EVAL, seed, n))
        logdens = const - np.sum((y_test[n] - f) ** 2, axis=1) / (2.0 * noise)
        m = logdens.max()
        per_point[n] = (m + math.log(np.mean(np.exp(logdens - m)))
                        - loglik_offset)
    return per_point, float(per_point.mean())


def predict_samples(model, x_row, s_samples, seed):
    """S predictive draws at one input: prior z, fresh layer noise, plus
    observation noise."""
    if s_samples < 1:
        raise InvalidParameter("S must be >= 1")
    gen = substream(TAG_EVAL, seed)
    f = _propagate_prior(model, np.asarray(x_row, dtype=np.float64),
                         s_samples, gen)
    return f + math.sqrt(model.noise_var) * gen.standard_normal(f.shape)


# ---------------------------------------------------------------------------
# one-sided Wilcoxon signed-rank test
# ---------------------------------------------------------------------------

def wilcoxon_one_sided(paired_diffs):
    """P(W+ >= observed) under the signed-rank null; H1: diffs > 0.

    Zero differences are dropped.  Exact enumeration of the 2^n sign
    patterns (via subset-sum counting over the tied-rank multiset) up to
    n = 20; above that, the normal approximation with tie correction.
    """
    d = np.asarray(paired_diffs, dtype=np.float64).ravel()
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise Undefined("all paired differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0.0].sum())

    if n <= 20:
        scaled = np.rint(2.0 * ranks).astype(np.int64)   # ties give .5 ranks
        total = int(scaled.sum())
        counts = np.zeros(total + 1, dtype=np.float64)
        counts[0] = 1.0
        for r in scaled:
            counts[r:] = counts[r:] + counts[:total + 1 - r]
        threshold = int(np.rint(2.0 * w_plus))
        return float(counts[threshold:].sum() / 2.0 ** n)

    _, tie_sizes = np.unique(np.rint(2.0 * ranks).astype(np.int64),
                             return_counts=True)
    mean_w = n * (n + 1) / 4.0
    var_w = (n * (n + 1) * (2 * n + 1) / 24.0
             - np.sum(tie_sizes ** 3 - tie_sizes) / 48.0)
    return float(norm.sf((w_plus - mean_w) / math.sqrt(var_w)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "dgp-snr-checkpoint"
CHECKPOINT_VERSION = 1


def config_hash(config_doc):
    canonical = json.dumps(config_doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_checkpoint(path, model, cfg_hash="", normalization=None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": cfg_hash,
        "normalization": normalization,
        "noise_raw": model.noise_raw.tolist(),
        "encoder": {
            "mode": model.encoder.mode,
            "input_dim": model.encoder.input_dim,
            "latent_dim": model.encoder.latent_dim,
            "weights": (None if not model.encoder.learned else
                        {k: v.tolist()
                         for k, v in model.encoder.weights.items()}),
        },
        "layers": [
            {
                "inducing": layer.inducing_inputs.tolist(),
                "q_mean": layer.q_mean.tolist(),
                "q_sqrt": layer.q_sqrt.tolist(),
                "lengthscales_raw": layer.kernel.lengthscales_raw.tolist(),
                "variance_raw": layer.kernel.variance_raw.tolist(),
                "mean_projection": layer.mean_projection.tolist(),
            }
            for layer in model.layers
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Returns (model, metadata dict with config_hash/normalization)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidParameter(f"{path} is not a {CHECKPOINT_FORMAT} file")
    enc = doc["encoder"]
    weights = enc["weights"]
    encoder = EncoderParams(
        enc["mode"], enc["input_dim"], enc["latent_dim"],
        None if weights is None else {k: np.asarray(v, dtype=np.float64)
                                      for k, v in weights.items()})
    layers = tuple(
        GpLayer(np.asarray(lay["inducing"], dtype=np.float64),
                np.asarray(lay["q_mean"], dtype=np.float64),
                np.asarray(lay["q_sqrt"], dtype=np.float64),
                RbfArdParams(
                    np.asarray(lay["lengthscales_raw"], dtype=np.float64),
                    np.asarray(lay["variance_raw"], dtype=np.float64)),
                np.asarray(lay["mean_projection"], dtype=np.float64))
        for lay in doc["layers"]
    )
    model = ModelState(layers, encoder,
                       np.asarray(doc["noise_raw"], dtype=np.float64))
    return model, {"config_hash": doc.get("config_hash", ""),
                   "normalization": doc.get("normalization")}


def write_trace(trace, path):
    """trace.csv: iter, elbo, adam_lr, natgrad_lr."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,elbo,adam_lr,natgrad_lr\n")
        for row in trace.rows:
            fh.write(f"{row.iteration},{row.elbo!r},{row.adam_lr!r},"
                     f"{row.natgrad_lr!r}\n")
