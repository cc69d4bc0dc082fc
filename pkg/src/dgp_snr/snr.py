"""Signal-to-noise measurement of gradient estimators.

SNR of an estimator component is |E[grad]| / std[grad], estimated from Q
independent draws.  Sweeps repeat the measurement across importance-sample
counts K (or outer-sample counts M), average per-parameter SNRs over
parameters and probe points, and fit a log-log slope against the sample
count.  Results export to fixed CSV schemas for downstream plotting.
"""

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameter
from .estimators import PhiSampler
from .rng import TAG_SNR, child_seed


@dataclass(frozen=True)
class SnrReport:
    estimator: str
    sweep_values: list             # the K (or M) grid
    k_samples: int                 # fixed K (equals the grid for K sweeps)
    m_samples: int
    q_samples: int
    per_param: np.ndarray          # (len(grid), P), mean over probe points
    mean_snr: np.ndarray           # (len(grid),), mean over params and points
    slope: float                   # d log10(mean SNR) / d log10(grid)
    slope_se: float
    sweep: str = "K"


@dataclass(frozen=True)
class HistogramData:
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float


def sample_gradients(model, x_n, y_n, kind, q_samples, m_samples, k_samples,
                     seed, point_index=0, threads=1):
    """Q independent estimator draws as a (Q, P) matrix.

    Row q comes from the substream derived from (seed, q), so the matrix
    is reproducible regardless of chunking or worker count; rows are
    always stored in q order.
    """
    seeds = [child_seed(TAG_SNR, seed, q) for q in range(q_samples)]

    def run_chunk(lo, hi, out):
        sampler = PhiSampler(model, x_n, y_n, m_samples, k_samples, kind,
                             point_index)
        for q in range(lo, hi):
            out[q] = sampler.draw(seeds[q])

    probe = PhiSampler(model, x_n, y_n, m_samples, k_samples, kind,
                       point_index)
    dim = sum(leaf.value.size for leaf in probe.phi)
    out = np.empty((q_samples, dim))
    if threads <= 1 or q_samples < 2 * threads:
        for q in range(q_samples):
            out[q] = probe.draw(seeds[q])
        return out

    bounds = np.linspace(0, q_samples, threads + 1, dtype=int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(run_chunk, bounds[i], bounds[i + 1], out)
                   for i in range(threads)]
        for f in futures:
            f.result()
    return out


def snr(samples):
    """Per-column |mean| / std (ddof=1).

    Zero-variance columns map to 0 when the mean is also zero and to
    +inf otherwise.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise InvalidParameter("SNR needs at least two samples")
    mean = np.abs(samples.mean(axis=0))
    std = samples.std(axis=0, ddof=1)
    out = np.empty_like(mean)
    degenerate = std == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(degenerate,
                       np.where(mean == 0.0, 0.0, np.inf),
                       mean / np.where(degenerate, 1.0, std))
    return out


def _fit_slope(grid, mean_snr):
    lx = np.log10(np.asarray(grid, dtype=np.float64))
    ly = np.log10(np.maximum(mean_snr, 1e-300))
    n = lx.size
    xc = lx - lx.mean()
    sxx = np.sum(xc * xc)
    slope = np.sum(xc * (ly - ly.mean())) / sxx
    resid = ly - (ly.mean() + slope * xc)
    if n > 2:
        se = math.sqrt(float(np.sum(resid * resid)) / (n - 2) / sxx)
    else:
        se = float("nan")
    return float(slope), se


def _sweep(model, x, y, point_indices, kind, grid, fixed, q_samples, seed,
           threads, sweep_axis):
    if list(grid) != sorted(grid):
        raise InvalidParameter("sweep values must be ascending")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    point_indices = [int(n) for n in point_indices]

    per_param = []
    for value in grid:
        m_samples, k_samples = ((fixed, value) if sweep_axis == "K"
                                else (value, fixed))
        point_snrs = []
        for n in sorted(point_indices):
            draws = sample_gradients(model, x[n], y[n], kind, q_samples,
                                     m_samples, k_samples,
                                     seed=child_seed(seed, n, value),
                                     point_index=n, threads=threads)
            point_snrs.append(snr(draws))
        per_param.append(np.mean(point_snrs, axis=0))
    per_param = np.asarray(per_param)
    mean_snr = per_param.mean(axis=1)
    slope, slope_se = _fit_slope(grid, mean_snr)
    return SnrReport(kind, list(grid),
                     fixed if sweep_axis == "M" else 0,
                     fixed if sweep_axis == "K" else 0,
                     q_samples, per_param, mean_snr, slope, slope_se,
                     sweep=sweep_axis)


def snr_sweep(model, x, y, point_indices, kind, k_list, m_samples, q_samples,
              seed, threads=1):
    """Mean SNR per K plus the fitted log10(SNR) vs log10(K) slope.

    Per probe point: Q estimator draws -> per-parameter SNR -> mean over
    parameters; the report averages over the probe points.  Output is
    invariant to the order of ``point_indices``.
    """
    return _sweep(model, x, y, point_indices, kind, list(k_list), m_samples,
                  q_samples, seed, threads, "K")


def snr_sweep_m(model, x, y, point_indices, kind, m_list, k_samples,
                q_samples, seed, threads=1):
    """Same measurement sweeping the outer sample count M at fixed K."""
    return _sweep(model, x, y, point_indices, kind, list(m_list), k_samples,
                  q_samples, seed, threads, "M")


def export_histogram(column, bins):
    """Histogram of one estimator component with moment overlays."""
    if bins < 1:
        raise InvalidParameter("bins must be >= 1")
    column = np.asarray(column, dtype=np.float64).ravel()
    counts, edges = np.histogram(column, bins=bins)
    std = column.std(ddof=1) if column.size > 1 else 0.0
    return HistogramData(edges, counts, float(column.mean()), float(std))


# ---------------------------------------------------------------------------
# CSV emission (schemas fixed for downstream plotting)
# ---------------------------------------------------------------------------

def write_snr_report(reports, path):
    """snr_report.csv: estimator, K, M, Q, param_index|MEAN, snr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "K", "M", "Q", "param_index", "snr"])
        for rep in reports:
            for i, value in enumerate(rep.sweep_values):
                k = value if rep.sweep == "K" else rep.k_samples
                m = value if rep.sweep == "M" else rep.m_samples
                for p in range(rep.per_param.shape[1]):
                    writer.writerow([rep.estimator, k, m, rep.q_samples, p,
                                     repr(rep.per_param[i, p])])
                writer.writerow([rep.estimator, k, m, rep.q_samples, "MEAN",
                                 repr(rep.mean_snr[i])])


def write_histogram(hist, path):
    """grad_hist_K{k}.csv: bin_lo, bin_hi, count."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for i in range(hist.counts.size):
            writer.writerow([repr(hist.bin_edges[i]),
                             repr(hist.bin_edges[i + 1]),
                             int(hist.counts[i])])


def thread_count(explicit=None):
    """Worker cap: explicit flag, else DGP_SNR_THREADS, else 1."""
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get("DGP_SNR_THREADS")
    return max(1, int(env)) if env else 1
