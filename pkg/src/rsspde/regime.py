"""State-dependent switching: interval layout, jump map and thinning sampler.

Regimes are 1-based integers. A rate matrix is represented row-wise: for a
state ``x`` and a current regime ``i`` the row function returns the
off-diagonal rates ``q_ij(x)`` for ``j = 1..s_max`` (the ``j = i`` entry is
zero) plus one trailing column holding the total rate of leaving the
truncated state space, i.e. jumping to some ``j > s_max``.
"""

import bisect
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

_Q0_RTOL = 1e-12


@dataclass(frozen=True)
class RateMatrix:
    row_fn: Callable
    num_regimes: int
    bound_L: float
    name: str = "custom"
    state_independent: bool = False

    def row(self, x, i):
        """Off-diagonal rate row(s), shape ``(..., num_regimes + 1)``."""
        x = np.asarray(x, dtype=float)
        i = np.asarray(i)
        out = np.array(self.row_fn(x, i), dtype=float, copy=True)
        # the diagonal is implied, never stored
        idx = np.clip(i - 1, 0, self.num_regimes - 1)
        np.put_along_axis(out, idx[..., None], 0.0, axis=-1)
        return out

    def rates(self, x, i, j):
        if j == i:
            raise ValueError("rates() is defined for i != j only; the diagonal is implied")
        if not 1 <= j <= self.num_regimes:
            raise ValueError(f"target regime {j} outside [1, {self.num_regimes}]")
        return float(self.row(x, i)[..., j - 1])

    def diagonal(self, x, i):
        return -self.row(x, i).sum(axis=-1)


def zero_rates(num_regimes=1):
    """No switching at all (bound_L = 0)."""

    def row_fn(x, i):
        return np.zeros(np.shape(i) + (num_regimes + 1,))

    return RateMatrix(row_fn, num_regimes, 0.0, name="none", state_independent=True)


def table_rates(table, name="table"):
    """Constant rates from a dense ``S x S`` table (diagonal ignored)."""
    q = np.array(table, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValueError("rate table must be square")
    if q.shape[0] < 1:
        raise ValueError("rate table is empty")
    q = q.copy()
    np.fill_diagonal(q, 0.0)
    if np.any(q < 0):
        raise ValueError("off-diagonal rates must be nonnegative")
    s = q.shape[0]
    padded = np.concatenate([q, np.zeros((s, 1))], axis=1)

    def row_fn(x, i):
        return padded[np.asarray(i) - 1]

    bound = float(q.sum(axis=1).max())
    return RateMatrix(row_fn, s, bound, name=name, state_independent=True)


@dataclass(frozen=True)
class IntervalLayout:
    """Consecutive half-open segments ``[left, right)`` on ``[0, bound_L]``."""

    regime: int
    segments: tuple  # ((target j, left, right), ...)
    bound_L: float

    @property
    def total(self):
        return self.segments[-1][2] if self.segments else 0.0


def build_intervals(x, i, q):
    """Lay the off-diagonal rates of row ``i`` end to end in increasing ``j``.

    The segment of target ``j`` has length ``q_ij(x)``; the diagonal is skipped.
    A trailing segment with target ``num_regimes + 1`` carries any rate of
    leaving the truncated state space.
    """
    i = int(i)
    if not 1 <= i <= q.num_regimes:
        raise ValueError(f"regime {i} outside [1, {q.num_regimes}]")
    row = q.row(x, i)
    if row.ndim != 1:
        raise ValueError("build_intervals expects a single state")
    if np.any(row < 0) or not np.all(np.isfinite(row)):
        raise ValueError(f"row {i} has negative or non-finite rates")
    total = math.fsum(row)
    if total > q.bound_L * (1 + _Q0_RTOL) + 1e-300:
        raise ValueError(
            f"row sum {total!r} of regime {i} exceeds bound_L={q.bound_L!r} (Q0 violated)"
        )
    segments = []
    acc = []
    left = 0.0
    for col, rate in enumerate(row):
        if rate <= 0.0:
            continue
        acc.append(rate)
        right = math.fsum(acc)
        segments.append((col + 1, left, right))
        left = right
    return IntervalLayout(i, tuple(segments), float(q.bound_L))


def evaluate_gamma(layout, r):
    """Jump displacement ``j - i`` if ``r`` falls in segment ``j``, else 0."""
    if not 0.0 <= r <= layout.bound_L:
        raise ValueError(f"r={r!r} outside [0, {layout.bound_L!r}]")
    if not layout.segments:
        return 0
    lefts = [seg[1] for seg in layout.segments]
    k = bisect.bisect_right(lefts, r) - 1
    if k < 0:
        return 0
    j, left, right = layout.segments[k]
    if left <= r < right:
        return j - layout.regime
    return 0


def switch_targets(rows, i, r):
    """Vectorised jump map over a batch.

    ``rows`` has shape ``(B, s_max + 1)``; returns the post-switch regime for
    each member (``i`` itself when ``r`` lands in the uncovered remainder, and
    ``s_max + 1`` when it lands in the exit segment).
    """
    cum = np.cumsum(rows, axis=-1)
    k = np.sum(cum <= r[..., None], axis=-1)
    hit = k < rows.shape[-1]
    return np.where(hit, k + 1, i)


def next_switch(x_path, i, q, t0, rng, t_max=math.inf):
    """First switching time after ``t0`` by thinning a rate-``bound_L`` Poisson clock.

    ``x_path(t)`` supplies the left-limit state at candidate times. Returns
    ``(sigma, new_regime)``; ``(inf, i)`` if no switch occurs before ``t_max``.
    """
    L = q.bound_L
    if L <= 0.0:
        return math.inf, i
    if q.state_independent and not np.any(q.row(x_path(t0), i) > 0):
        return math.inf, i
    t = t0
    while True:
        t += rng.exponential(1.0 / L)
        if t > t_max:
            return math.inf, i
        r = rng.uniform(0.0, L)
        d = evaluate_gamma(build_intervals(x_path(t), i, q), r)
        if d != 0:
            return t, i + d
