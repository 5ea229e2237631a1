"""Conditional quantiles by inverting a Gaussian-mixture CDF.

The mixture CDF is continuous, monotone and cheap to evaluate, so a plain
bisection with an automatically widened bracket is both robust and exact
enough. The default bracket of [-10, 10] assumes the outcome has been
standardized; callers working on raw scales must supply their own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .core import FloatArray, UnbracketedRootError, ValidationError
from .density import ConditionalGaussianMixture, mixture_cdf

DEFAULT_BRACKET = (-10.0, 10.0)
MAX_BRACKET_DOUBLINGS = 3


@dataclass(frozen=True)
class QuantileRequest:
    """A probability level in (0, 1), the mixture to invert and a search bracket."""

    upsilon: float
    mixture: ConditionalGaussianMixture
    bracket: tuple[float, float] = DEFAULT_BRACKET

    def __post_init__(self):
        if not (0.0 < self.upsilon < 1.0):
            raise ValidationError(f"upsilon must lie in (0, 1), got {self.upsilon}")
        lo, hi = self.bracket
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValidationError(f"invalid bracket {self.bracket}")


def _expand_bracket(cdf, upsilon: float, lo: float, hi: float) -> tuple[float, float]:
    # widen symmetrically about the bracket center, doubling the half-width
    for _ in range(MAX_BRACKET_DOUBLINGS + 1):
        if cdf(lo) <= upsilon <= cdf(hi):
            return lo, hi
        center = 0.5 * (lo + hi)
        half = hi - center
        lo, hi = center - 2.0 * half, center + 2.0 * half
    raise UnbracketedRootError(
        f"level {upsilon} not bracketed after {MAX_BRACKET_DOUBLINGS} doublings"
    )


def conditional_quantile(req: QuantileRequest, tol: float = 1e-8) -> float:
    """Quantile of order ``req.upsilon``: the q with |F(q) - upsilon| <= tol."""
    cdf = lambda v: mixture_cdf(req.mixture, v)  # noqa: E731
    lo, hi = _expand_bracket(cdf, req.upsilon, *req.bracket)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = cdf(mid)
        if abs(f_mid - req.upsilon) <= tol:
            return mid
        if f_mid < req.upsilon:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14 * max(1.0, abs(lo), abs(hi)):
            return 0.5 * (lo + hi)
    return 0.5 * (lo + hi)


def mixture_quantile_batch(
    weights: FloatArray,
    means: FloatArray,
    variances: FloatArray,
    upsilon: float,
    bracket: tuple[float, float] = DEFAULT_BRACKET,
    tol: float = 1e-8,
) -> FloatArray:
    """Row-wise quantiles for a batch of mixtures given as (n, K) parameter arrays.

    Vectorized bisection over all rows at once; used to build per-observation
    nuisance quantiles without a Python-level loop.
    """
    if not (0.0 < upsilon < 1.0):
        raise ValidationError(f"upsilon must lie in (0, 1), got {upsilon}")
    w = np.asarray(weights, dtype=np.float64)
    mu = np.asarray(means, dtype=np.float64)
    sd = np.sqrt(np.asarray(variances, dtype=np.float64))
    n = w.shape[0]

    def cdf(v: FloatArray) -> FloatArray:
        z = (v[:, None] - mu) / sd
        return np.einsum("nk,nk->n", ndtr(z), w)

    lo = np.full(n, float(bracket[0]))
    hi = np.full(n, float(bracket[1]))
    for _ in range(MAX_BRACKET_DOUBLINGS + 1):
        bad = (cdf(lo) > upsilon) | (cdf(hi) < upsilon)
        if not bad.any():
            break
        center = 0.5 * (lo[bad] + hi[bad])
        half = hi[bad] - center
        lo[bad] = center - 2.0 * half
        hi[bad] = center + 2.0 * half
    else:
        raise UnbracketedRootError(
            f"level {upsilon} not bracketed after {MAX_BRACKET_DOUBLINGS} doublings"
        )

    # fixed iteration count: halving until the bracket is ~1e-13 wide
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        below = cdf(mid) < upsilon
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if float(np.max(hi - lo)) <= tol * 1e-3:
            break
    return 0.5 * (lo + hi)
