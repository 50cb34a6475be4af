"""Search-space samplers: exhaustive grid, seeded random, and a sequential
model-based sampler in the TPE family.

Dimensions are duck-typed: anything with name/kind plus values (choice) or
low/high (uniform, log_uniform, int_uniform) works. All samplers are pure
functions of (space, inputs, seed).
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

GRID_PRODUCT_CAP = 10_000


@dataclass(frozen=True)
class TrialRecord:
    params: dict
    objective: float  # None marks a failed trial
    trial_index: int


@dataclass(frozen=True)
class TpeSettings:
    gamma: float = 0.25
    n_candidates: int = 24
    n_startup: int = 5
    bandwidth_factor: float = 1.06


def _native(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def _int_grid(low, high, k):
    pts = np.linspace(low, high, k)
    out = []
    for p in pts:
        v = int(np.round(p))  # numpy rounds half to even
        v = min(max(v, low), high)
        if v not in out:
            out.append(v)
    return out


def _dim_grid_values(dim, points_per_range):
    if dim.kind == "choice":
        return [_native(v) for v in dim.values]
    if dim.kind == "uniform":
        return [float(v) for v in np.linspace(dim.low, dim.high, points_per_range)]
    if dim.kind == "log_uniform":
        return [float(v) for v in np.geomspace(dim.low, dim.high, points_per_range)]
    if dim.kind == "int_uniform":
        return _int_grid(dim.low, dim.high, points_per_range)
    raise ValidationError(f"unknown dimension kind {dim.kind!r}")


def sample_grid(space, grid_points_per_range=5, cap=GRID_PRODUCT_CAP):
    """Full Cartesian product; range dimensions are discretized.

    Linear spacing for uniform/int_uniform, geometric for log_uniform.
    Raises when the product exceeds `cap` (use the random sampler instead).
    """
    if not space:
        raise ValidationError("sample_grid requires a non-empty search space")
    per_dim = [_dim_grid_values(d, grid_points_per_range) for d in space]
    size = math.prod(len(v) for v in per_dim)
    if size > cap:
        raise ValidationError(
            f"grid of {size} points exceeds the cap of {cap}; "
            "use the random sampler for spaces this large"
        )
    names = [d.name for d in space]
    return [dict(zip(names, combo)) for combo in itertools.product(*per_dim)]


def _draw(dim, rng):
    if dim.kind == "choice":
        return _native(dim.values[int(rng.integers(0, len(dim.values)))])
    if dim.kind == "uniform":
        return float(rng.uniform(dim.low, dim.high))
    if dim.kind == "log_uniform":
        return float(np.exp(rng.uniform(np.log(dim.low), np.log(dim.high))))
    if dim.kind == "int_uniform":
        return int(rng.integers(dim.low, dim.high + 1))
    raise ValidationError(f"unknown dimension kind {dim.kind!r}")


def sample_random(space, n, seed):
    """n i.i.d. draws from the space, fully determined by `seed`."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return [{d.name: _draw(d, rng) for d in space} for _ in range(n)]


# ---------------------------------------------------------------------------
# TPE

def _transform(dim, x):
    return math.log(x) if dim.kind == "log_uniform" else float(x)


def _untransform(dim, z, lo, hi):
    z = min(max(z, lo), hi)
    if dim.kind == "log_uniform":
        # exp(log(x)) can land one ulp outside the range; clamp again
        return float(min(max(math.exp(z), dim.low), dim.high))
    if dim.kind == "int_uniform":
        return int(min(max(int(np.round(z)), dim.low), dim.high))
    return float(z)


def _bandwidth(values, span, factor):
    # Silverman-style rate with a span-relative floor so the density never
    # collapses onto a cluster of near-identical good points.
    n = len(values)
    sigma = float(np.std(values))
    bw = factor * sigma * n ** (-0.2)
    floor = 0.15 * span * n ** (-0.2)
    return max(bw, floor, 1e-300)


def _kde_logpdf(x, centers, bw):
    z = (x - np.asarray(centers)) / bw
    # mean of Gaussian kernels, in log space for stability
    log_k = -0.5 * z * z - 0.5 * np.log(2 * np.pi) - np.log(bw)
    m = log_k.max()
    return float(m + np.log(np.mean(np.exp(log_k - m))))


def _cat_logprob(value, values, choices):
    counts = {c: 1 for c in choices}  # add-one smoothing
    for v in values:
        if v in counts:
            counts[v] += 1
    total = sum(counts.values())
    return math.log(counts.get(value, 1) / total)


def suggest_tpe(space, history, direction, settings=None, seed=0):
    """Propose one point given past trials.

    With fewer than n_startup successful trials this falls back to a random
    draw. Otherwise the successful history is split at the gamma-quantile of
    the objective into a good set G and the rest B; n_candidates points are
    drawn from per-dimension kernel densities fit on G and the candidate
    maximizing density_G / density_B is returned.
    """
    if settings is None:
        settings = TpeSettings()
    if not space:
        return {}
    ok = [r for r in history
          if r.objective is not None and np.isfinite(r.objective)]
    if len(ok) < settings.n_startup:
        return sample_random(space, 1, seed)[0]

    sign = -1.0 if direction == "maximize" else 1.0
    ok = sorted(ok, key=lambda r: (sign * r.objective, r.trial_index))
    n_good = max(1, math.ceil(settings.gamma * len(ok)))
    good, rest = ok[:n_good], ok[n_good:]

    rng = np.random.default_rng(seed)
    candidates = []
    scores = []
    for _ in range(settings.n_candidates):
        cand = {}
        log_ratio = 0.0
        for dim in space:
            if dim.kind == "choice":
                choices = [_native(v) for v in dim.values]
                g_vals = [r.params[dim.name] for r in good if dim.name in r.params]
                b_vals = [r.params[dim.name] for r in rest if dim.name in r.params]
                probs = []
                for c in choices:
                    probs.append(math.exp(_cat_logprob(c, g_vals, choices)))
                probs = np.array(probs) / sum(probs)
                value = choices[int(rng.choice(len(choices), p=probs))]
                cand[dim.name] = value
                log_ratio += _cat_logprob(value, g_vals, choices)
                log_ratio -= _cat_logprob(value, b_vals, choices)
            else:
                lo, hi = _transform(dim, dim.low), _transform(dim, dim.high)
                span = hi - lo
                g_vals = [_transform(dim, r.params[dim.name])
                          for r in good if dim.name in r.params]
                if not g_vals:
                    z = rng.uniform(lo, hi)
                else:
                    bw_g = _bandwidth(g_vals, span, settings.bandwidth_factor)
                    center = g_vals[int(rng.integers(0, len(g_vals)))]
                    z = rng.normal(center, bw_g)
                value = _untransform(dim, z, lo, hi)
                cand[dim.name] = value
                zv = _transform(dim, value) if dim.kind != "int_uniform" else float(
                    min(max(value, dim.low), dim.high))
                if g_vals:
                    log_ratio += _kde_logpdf(zv, g_vals, bw_g)
                b_vals = [_transform(dim, r.params[dim.name])
                          for r in rest if dim.name in r.params]
                if b_vals:
                    bw_b = _bandwidth(b_vals, span, settings.bandwidth_factor)
                    log_ratio -= _kde_logpdf(zv, b_vals, bw_b)
                else:
                    log_ratio -= -math.log(max(span, 1e-300))  # uniform density over the range
        candidates.append(cand)
        scores.append(log_ratio)

    best = int(np.argmax(scores))
    return candidates[best]
