"""Characterization of learned nonlinearities.

Covers where the nonlinearity is actually used (input samples and the
high-mass region), how quadratic it is (least-squares fit, curvature sign and
an exact binomial sign test) and how its power splits across Hermite orders.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .autodiff import make_rng
from .inner import InnerNet, grid_axes, grid_points, preact_tuples

log = logging.getLogger(__name__)

QUAD_TERMS = ("x1^2", "x2^2", "x1*x2", "x1", "x2", "1")


class FitError(ValueError):
    pass


class WhiteningError(ValueError):
    pass


@dataclass
class InputSample:
    values: np.ndarray  # (rows, n)
    layer: np.ndarray  # (rows,) index of the hidden layer each row came from

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("input sample contains non-finite values")

    @property
    def arity(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return len(self.values)


def collect_inputs(net, images, batch_size: int = 100) -> InputSample:
    """Every activation call's argument tuple over ``images``, with dropout off.

    Rows are ordered by batch, then hidden layer, then example and unit (and
    spatial position for conv nets).
    """
    if len(images) == 0:
        raise ValueError("collect_inputs: empty test set")
    n = net.spec.fan
    batch_size = net.safe_batch(batch_size)
    rows, layers = [], []
    prev_taps, prev_mode = net.taps, net.training
    net.taps = []
    net.eval()
    try:
        for i in range(0, len(images), batch_size):
            net.taps.clear()
            net.predict_logits(images[i : i + batch_size], batch_size=batch_size)
            for li, z in enumerate(net.taps):
                t = preact_tuples(z, n)
                rows.append(t)
                layers.append(np.full(len(t), li, dtype=np.int64))
    finally:
        net.taps = prev_taps
        net.training = prev_mode
    return InputSample(np.concatenate(rows), np.concatenate(layers))


# ---------------------------------------------------------------------------
# 99% mass region


@dataclass
class MassMask:
    mask: np.ndarray  # (bins_x, bins_y) bool
    counts: np.ndarray
    edges: tuple[np.ndarray, np.ndarray]
    mass: float
    covered: float  # empirical fraction of samples inside the mask
    degenerate_axes: tuple[int, ...] = ()

    @property
    def bbox(self) -> tuple[tuple[float, float], tuple[float, float]]:
        box = []
        for axis in (0, 1):
            hit = np.nonzero(self.mask.any(axis=1 - axis))[0]
            e = self.edges[axis]
            box.append((float(e[hit[0]]), float(e[hit[-1] + 1])))
        return tuple(box)

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        idx = []
        for axis in (0, 1):
            e = self.edges[axis]
            i = np.searchsorted(e, p[:, axis], side="right") - 1
            i = np.where(p[:, axis] == e[-1], len(e) - 2, i)
            idx.append(i)
        ok = (idx[0] >= 0) & (idx[0] < self.mask.shape[0]) & (idx[1] >= 0) & (idx[1] < self.mask.shape[1])
        out = np.zeros(len(p), dtype=bool)
        out[ok] = self.mask[idx[0][ok], idx[1][ok]]
        return out

    def grid_mask(self, bounds, resolution) -> np.ndarray:
        axes = grid_axes(bounds, resolution)
        return self.contains(grid_points(axes)).reshape([len(a) for a in axes])


def mass_mask(sample, mass: float = 0.99, bins: int = 101) -> MassMask:
    """Smallest set of histogram cells holding at least ``mass`` of the 2-D sample.

    Cells are taken in descending count order; every cell tied with the last
    one needed is included too.
    """
    values = sample.values if isinstance(sample, InputSample) else np.asarray(sample, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != 2:
        raise ValueError("mass_mask needs two-argument samples")
    if not 0 < mass <= 1:
        raise ValueError(f"mass must lie in (0, 1], got {mass}")
    edges, degenerate = [], []
    for axis in (0, 1):
        lo, hi = float(values[:, axis].min()), float(values[:, axis].max())
        if lo == hi:
            degenerate.append(axis)
            log.warning("mass_mask: zero variance on axis %d; collapsing it to %g", axis, lo)
            edges.append(np.array([lo, hi]))
        else:
            edges.append(np.linspace(lo, hi, bins + 1))
    counts, _, _ = np.histogram2d(values[:, 0], values[:, 1], bins=edges)
    flat = counts.ravel()
    order = np.argsort(-flat, kind="stable")
    cum = np.cumsum(flat[order])
    total = flat.sum()
    need = int(np.searchsorted(cum, mass * total - 1e-9 * total))
    cutoff = flat[order[min(need, len(order) - 1)]]
    mask = (counts >= cutoff) & (counts > 0)
    return MassMask(mask, counts, (edges[0], edges[1]), mass, float(counts[mask].sum() / total), tuple(degenerate))


# ---------------------------------------------------------------------------
# quadratic fits


@dataclass
class QuadFit:
    coeffs: np.ndarray  # c1..c6 in QUAD_TERMS order
    r2: float
    count: int

    @property
    def curvature(self) -> float:
        c1, c2, c3 = self.coeffs[:3]
        return float(c1 * c2 - c3 * c3 / 4.0)

    def evaluate(self, points) -> np.ndarray:
        return quad_design(points) @ self.coeffs

    __call__ = evaluate


def quad_design(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x1, x2 = x[:, 0], x[:, 1]
    return np.stack([x1 * x1, x2 * x2, x1 * x2, x1, x2, np.ones_like(x1)], axis=1)


def fit_quadratic_points(points, values, rcond: float = 1e-10) -> QuadFit:
    """Ordinary least squares of ``values`` on the six-term quadratic basis."""
    A = quad_design(points)
    y = np.asarray(values, dtype=np.float64).reshape(-1)
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    As = A / scale
    u, s, vt = np.linalg.svd(As, full_matrices=False)
    if len(s) < 6 or s[-1] <= rcond * s[0]:
        bad = vt[len(s) :] if len(s) < 6 else vt[s <= rcond * s[0]]
        dirs = []
        for v in bad:
            v = v / scale
            v = v / np.abs(v).max()
            dirs.append(" ".join(f"{c:+.3g}*{t}" for c, t in zip(v, QUAD_TERMS) if abs(c) > 1e-6))
        raise FitError("rank-deficient quadratic design; null directions: " + "; ".join(dirs))
    coeffs = (vt.T @ ((u.T @ y) / s)) / scale
    resid = y - A @ coeffs
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -math.inf)
    return QuadFit(coeffs, r2, len(y))


def fit_quadratic(net, sample, mode: str = "density", bounds=None, resolution: int = 101) -> QuadFit:
    """Fit the net's outputs on the sample points ("density") or on a uniform grid.

    The density mode weights regions by how often the nonlinearity is used there.
    The uniform mode uses ``bounds`` (default: sample min/max box).
    """
    values = sample.values if isinstance(sample, InputSample) else np.asarray(sample, dtype=np.float64)
    if values.shape[1] != 2:
        raise ValueError("fit_quadratic needs two-argument samples")
    if mode == "density":
        pts = values
    elif mode == "uniform":
        if bounds is None:
            bounds = [(values[:, i].min(), values[:, i].max()) for i in range(2)]
        pts = grid_points(grid_axes(bounds, resolution))
    else:
        raise ValueError(f"unknown fit mode {mode!r}")
    return fit_quadratic_points(pts, net.evaluate(pts))


class QuadraticNet:
    """Stand-in nonlinearity given by explicit quadratic coefficients."""

    arity = 2

    def __init__(self, coeffs):
        self.coeffs = np.asarray(coeffs, dtype=np.float64)

    def evaluate(self, points) -> np.ndarray:
        return quad_design(points) @ self.coeffs

    __call__ = evaluate


# ---------------------------------------------------------------------------
# exact binomial sign test


def binom_pmf(k: int, n: int, p) -> Fraction:
    p = Fraction(p)
    return math.comb(n, k) * p**k * (1 - p) ** (n - k)


def binom_cdf(k: int, n: int, p=0.5) -> float:
    """P(X <= k), summed exactly in rationals."""
    if k < 0:
        return 0.0
    return float(min(sum((binom_pmf(i, n, p) for i in range(min(k, n) + 1)), Fraction(0)), Fraction(1)))


def binom_sf(k: int, n: int, p=0.5) -> float:
    """P(X >= k), summed exactly in rationals."""
    if k > n:
        return 0.0
    return float(min(sum((binom_pmf(i, n, p) for i in range(max(k, 0), n + 1)), Fraction(0)), Fraction(1)))


def binom_test(k: int, n: int, p=0.5) -> tuple[float, float]:
    """(two-sided, one-sided upper) p-values; two-sided is 2*min tail, capped at 1."""
    lower, upper = binom_cdf(k, n, p), binom_sf(k, n, p)
    return min(1.0, 2.0 * min(lower, upper)), upper


@dataclass
class CurvatureStats:
    negative: int
    trials: int
    p_two_sided: float
    p_one_sided: float
    table: list[dict] = field(default_factory=list)

    @property
    def fraction_negative(self) -> float:
        return self.negative / self.trials


def curvature_stats(fits, null_p=0.5, labels=None) -> CurvatureStats:
    fits = list(fits)
    if not fits:
        raise ValueError("curvature_stats needs at least one fit")
    labels = labels or [str(i) for i in range(len(fits))]
    table = [
        {"trial": lab, "curvature": f.curvature, "negative": f.curvature < 0, "r2": f.r2}
        for lab, f in zip(labels, fits)
    ]
    k = sum(row["negative"] for row in table)
    two, one = binom_test(k, len(fits), null_p)
    return CurvatureStats(k, len(fits), two, one, table)


# ---------------------------------------------------------------------------
# spectral power


@dataclass
class Whitening:
    mean: np.ndarray
    matrix: np.ndarray  # z = (x - mean) @ matrix

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.matrix


def whitening(x, tol: float = 1e-12) -> Whitening:
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / len(x)
    lam, vec = np.linalg.eigh(cov)
    if lam[0] <= tol * max(lam[-1], tol):
        raise WhiteningError(f"sample covariance is singular (eigenvalues {lam})")
    return Whitening(mean, (vec / np.sqrt(lam)) @ vec.T)


def hermite_normalized(z: np.ndarray, kmax: int) -> np.ndarray:
    """He_k(z)/sqrt(k!) for k = 0..kmax; orthonormal under the standard normal."""
    out = np.empty(z.shape + (kmax + 1,))
    out[..., 0] = 1.0
    if kmax >= 1:
        out[..., 1] = z
    for k in range(2, kmax + 1):
        out[..., k] = (z * out[..., k - 1] - math.sqrt(k - 1) * out[..., k - 2]) / math.sqrt(k)
    return out


def multi_indices(n: int, order: int) -> list[tuple[int, ...]]:
    return [idx for idx in itertools.product(range(order + 1), repeat=n) if sum(idx) == order][::-1]


def hermite_basis(z: np.ndarray, lmax: int) -> tuple[np.ndarray, np.ndarray]:
    """Products of 1-D Hermite terms, columns grouped by total order; returns (Phi, order)."""
    h = hermite_normalized(z, lmax)
    cols, orders = [], []
    for ell in range(lmax + 1):
        for idx in multi_indices(z.shape[1], ell):
            cols.append(np.prod([h[:, j, k] for j, k in enumerate(idx)], axis=0))
            orders.append(ell)
    return np.stack(cols, axis=1), np.asarray(orders)


@dataclass
class SpectrumReport:
    power: np.ndarray  # P_l for l = 0..lmax
    convention: str
    whitening: Whitening
    second_moment: float

    @property
    def lmax(self) -> int:
        return len(self.power) - 1

    def dominant_order(self, skip_dc: bool = True) -> int:
        start = 1 if skip_dc else 0
        return int(np.argmax(self.power[start:]) + start)

    def fraction(self) -> np.ndarray:
        total = self.power.sum()
        return self.power / total if total > 0 else self.power


def spectral_power(net, sample, lmax: int = 8, orthogonalize: bool = True) -> SpectrumReport:
    """Power of the nonlinearity per total Hermite order under its input density.

    Points are whitened first. With ``orthogonalize`` the graded Hermite basis is
    re-orthonormalized under the empirical measure (QR in order of increasing
    total order), which keeps the per-order subspaces and makes the projections
    exact for that measure; without it the plain Hermite products are used.
    """
    values = sample.values if isinstance(sample, InputSample) else np.asarray(sample, dtype=np.float64)
    n = values.shape[1]
    if n not in (2, 3):
        raise ValueError("spectral_power supports two or three arguments")
    white = whitening(values)
    z = white.apply(values)
    f = np.asarray(net.evaluate(values), dtype=np.float64)
    phi, orders = hermite_basis(z, lmax)
    N = len(values)
    if orthogonalize:
        q, r = np.linalg.qr(phi / math.sqrt(N))
        keep = np.abs(np.diag(r)) > 1e-10 * np.abs(np.diag(r)).max()
        proj = (q.T @ f / math.sqrt(N)) * keep
        convention = "hermite-total-order/empirical-qr/whitened"
    else:
        proj = phi.T @ f / N
        convention = "hermite-total-order/plain/whitened"
    power = np.bincount(orders, weights=proj**2, minlength=lmax + 1)
    return SpectrumReport(power, convention, white, float(np.mean(f * f)))


def xavier_control(count: int, n: int, rng: np.random.Generator) -> list[InnerNet]:
    """Untrained Xavier-initialized inner nets, each from its own seed."""
    seeds = rng.choice(2**62, size=count, replace=False)
    return [InnerNet(n, make_rng(int(s))) for s in seeds]
