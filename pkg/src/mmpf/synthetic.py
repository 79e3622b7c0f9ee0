"""Analytic group distributions with computable ground truth.

Each group ``a`` has ``X | a ~ N(m_a, 1)`` and ``Y | X=x, a ~ Ber(f_a(x))``.
For any simplex weights the Brier/cross-entropy optimal predictor is the
density-weighted mixture of group posteriors, and its group risks split into a
Bayes term plus a discrepancy term. Everything here is evaluated with
composite Gauss-Legendre quadrature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import xlogy

from .core import as_simplex, dominates
from .data_io import GroupedDataset, parse_key_values

LOSSES = ("bs", "ce")
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class DegenerateError(ArithmeticError):
    """The weighted mixture density vanished, so the optimal predictor is undefined."""


class InfiniteRiskError(ArithmeticError):
    """Cross-entropy risk is infinite (predictor puts zero mass on a possible label)."""


class ResourceLimitError(RuntimeError):
    pass


def _check_loss(loss: str) -> str:
    loss = loss.lower()
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}, got {loss!r}")
    return loss


# ---------------------------------------------------------------------------
# group distributions


@dataclass(frozen=True)
class GaussianPiecewiseSpec:
    """Unit-variance Gaussian features with a two-level step posterior per group.

    ``f_a(x) = low[a]`` for ``x <= thresholds[a]`` and ``high[a]`` above it.
    """

    means: tuple[float, ...]
    thresholds: tuple[float, ...]
    low: tuple[float, ...]
    high: tuple[float, ...]
    priors: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("means", "thresholds", "low", "high"):
            object.__setattr__(self, name, tuple(float(v) for v in np.atleast_1d(getattr(self, name))))
        n = len(self.means)
        if n == 0:
            raise ValueError("spec needs at least one group")
        if not (len(self.thresholds) == len(self.low) == len(self.high) == n):
            raise ValueError("means, thresholds, low and high must have one entry per group")
        for name in ("low", "high"):
            vals = np.array(getattr(self, name))
            if np.any(vals < 0) or np.any(vals > 1):
                raise ValueError(f"{name} plateaus must lie in [0, 1]")
        priors = np.full(n, 1.0 / n) if self.priors is None else as_simplex(self.priors, atol=1e-9)
        if priors.size != n:
            raise ValueError("priors must have one entry per group")
        object.__setattr__(self, "priors", tuple(float(p) for p in priors))

    @property
    def n_groups(self) -> int:
        return len(self.means)

    def breakpoints(self) -> np.ndarray:
        return np.array(self.thresholds)

    def posteriors(self, x) -> np.ndarray:
        """``P(Y=1 | x, a)`` for every group, shape ``(n_groups,) + x.shape``."""
        x = np.asarray(x, dtype=float)
        t = np.array(self.thresholds).reshape((-1,) + (1,) * x.ndim)
        lo = np.array(self.low).reshape(t.shape)
        hi = np.array(self.high).reshape(t.shape)
        return np.where(x <= t, lo, hi)


@dataclass(frozen=True)
class SineMixSpec:
    """Two groups, ``X|0 ~ N(0,1)``, ``X|1 ~ N(offset,1)``, ``A ~ Ber(1/2)``.

    Group 1's posterior flips a fraction ``flip`` of group 0's towards the
    opposite rounded label.
    """

    offset: float = 0.0
    flip: float = 0.0

    def __post_init__(self):
        if self.offset < 0:
            raise ValueError("offset must be >= 0")
        if not 0.0 <= self.flip <= 1.0:
            raise ValueError("flip rate must lie in [0, 1]")

    n_groups = 2
    priors = (0.5, 0.5)

    @property
    def means(self) -> tuple[float, float]:
        return (0.0, float(self.offset))

    def breakpoints(self) -> np.ndarray:
        return np.array([0.0])

    def posteriors(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        f0 = sine_mix_base(x)
        f1 = (1.0 - self.flip) * f0 + self.flip * (1.0 - _round_half_up(f0))
        return np.stack([f0, f1])


def sine_mix_base(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    pos = (x >= 0).astype(float)
    arg = np.sin(2.0 * np.pi * x) + 1.0
    sgn = np.where(arg >= 0, 1.0, -1.0)
    return (0.6 + 0.2 * pos) * sgn + 0.2 - 0.1 * pos


def _round_half_up(v):
    return np.floor(np.asarray(v) + 0.5)


Spec = GaussianPiecewiseSpec | SineMixSpec


def posterior(spec: Spec, a: int, x):
    """``P(Y=1 | X=x, A=a)``; a threshold point belongs to the low plateau."""
    if not 0 <= a < spec.n_groups:
        raise IndexError(f"group {a} out of range for a {spec.n_groups}-group spec")
    out = spec.posteriors(x)[a]
    return float(out) if np.ndim(out) == 0 else out


def sine_mix_posteriors(mix: SineMixSpec, a: int, x):
    return posterior(mix, a, x)


def group_densities(spec: Spec, x) -> np.ndarray:
    """Unit-variance Gaussian densities ``p(x | a)``, shape ``(n_groups,) + x.shape``."""
    x = np.asarray(x, dtype=float)
    m = np.array(spec.means).reshape((-1,) + (1,) * x.ndim)
    return np.exp(-0.5 * (x - m) ** 2) / _SQRT_2PI


def kl_between_group_marginals(spec: Spec) -> float:
    """``KL(p(X|0) || p(X|1))`` in nats for two unit-variance Gaussians."""
    if spec.n_groups != 2:
        raise ValueError("KL between group marginals needs exactly two groups")
    m0, m1 = spec.means
    return 0.5 * (m1 - m0) ** 2


# ---------------------------------------------------------------------------
# optimal classifier


def _mixture(mu: np.ndarray, dens: np.ndarray, post: np.ndarray) -> np.ndarray:
    # mu: (..., A); dens/post: (A, N) -> (..., N)
    num = mu @ (dens * post)
    den = mu @ dens
    if np.any(den <= 0):
        raise DegenerateError("weighted group density is zero; optimal predictor undefined there")
    return np.clip(num / den, 0.0, 1.0)


def optimal_classifier(spec: Spec, mu, x):
    """Probability of ``Y=1`` under the optimal predictor for weights ``mu``.

    ``h(x) = sum_a mu_a p(x|a) f_a(x) / sum_a mu_a p(x|a)``.
    """
    mu = as_simplex(mu)
    if mu.size != spec.n_groups:
        raise ValueError(f"weights have {mu.size} entries for {spec.n_groups} groups")
    x_arr = np.asarray(x, dtype=float)
    flat = x_arr.reshape(-1)
    h = _mixture(mu, group_densities(spec, flat), spec.posteriors(flat)).reshape(x_arr.shape)
    return float(h) if h.ndim == 0 else h


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureConfig:
    sigmas: float = 8.0
    nodes: int = 2048
    order: int = 32

    def __post_init__(self):
        if self.nodes < 64:
            raise ValueError("quadrature needs at least 64 nodes")
        if self.sigmas < 8:
            raise ValueError("integration bounds must cover every mean +/- 8 sigma")
        if self.order < 2 or self.nodes % self.order:
            raise ValueError("nodes must be a multiple of the per-panel order")


def quadrature_rule(spec: Spec, quad: QuadratureConfig = QuadratureConfig()):
    """Composite Gauss-Legendre nodes/weights over ``[min(m)-s, max(m)+s]``.

    Panel edges include every posterior breakpoint inside the interval so the
    step integrand is smooth within each panel.
    """
    lo = min(spec.means) - quad.sigmas
    hi = max(spec.means) + quad.sigmas
    cuts = np.unique(np.concatenate([[lo, hi], [b for b in spec.breakpoints() if lo < b < hi]]))
    lengths = np.diff(cuts)
    n_panels = quad.nodes // quad.order
    if n_panels < lengths.size:
        raise ValueError("not enough quadrature panels for the breakpoints")
    # at least one panel per segment, the rest proportional to length
    alloc = np.ones(lengths.size, dtype=int)
    spare = n_panels - lengths.size
    share = lengths / lengths.sum() * spare
    alloc += np.floor(share).astype(int)
    leftover = n_panels - alloc.sum()
    if leftover:
        alloc[np.argsort(-(share - np.floor(share)))[:leftover]] += 1

    gx, gw = np.polynomial.legendre.leggauss(quad.order)
    xs, ws = [], []
    for a, b, k in zip(cuts[:-1], cuts[1:], alloc):
        edges = np.linspace(a, b, k + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[:-1] + edges[1:])
        xs.append((mid[:, None] + half[:, None] * gx[None, :]).ravel())
        ws.append((half[:, None] * gw[None, :]).ravel())
    return np.concatenate(xs), np.concatenate(ws)


@dataclass
class _Grid:
    x: np.ndarray
    w: np.ndarray
    dens: np.ndarray  # (A, N)
    post: np.ndarray  # (A, N)
    mass: np.ndarray = field(init=False)  # (A, N) quadrature weight times density

    def __post_init__(self):
        self.mass = self.dens * self.w


def _grid(spec: Spec, quad: QuadratureConfig) -> _Grid:
    x, w = quadrature_rule(spec, quad)
    return _Grid(x, w, group_densities(spec, x), spec.posteriors(x))


# ---------------------------------------------------------------------------
# risks


@dataclass
class RiskTerms:
    """Per-group risk split into the Bayes term and the discrepancy term."""

    bayes: np.ndarray
    discrepancy: np.ndarray
    total: np.ndarray


def _pointwise_loss(f, h, loss):
    """Expected loss of predicting ``h`` when ``Y ~ Ber(f)`` (binary one-hot convention)."""
    if loss == "bs":
        return 2.0 * (f * (1.0 - h) ** 2 + (1.0 - f) * h ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -(xlogy(f, h) + xlogy(1.0 - f, 1.0 - h))


def _bayes_pointwise(f, loss):
    if loss == "bs":
        return 2.0 * f * (1.0 - f)
    return -(xlogy(f, f) + xlogy(1.0 - f, 1.0 - f))


def _discrepancy_pointwise(f, h, loss):
    if loss == "bs":
        return 2.0 * (f - h) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return xlogy(f, f) - xlogy(f, h) + xlogy(1.0 - f, 1.0 - f) - xlogy(1.0 - f, 1.0 - h)


def _raise_if_infinite(values, where):
    if not np.all(np.isfinite(values)):
        raise InfiniteRiskError(f"cross-entropy risk is infinite ({where}): the predictor assigns zero "
                                "probability to a label with positive probability")


def _risk_batch(g: _Grid, mus: np.ndarray, loss: str) -> np.ndarray:
    """Total group risks for a batch of weight vectors, shape ``(M, A)``."""
    h = _mixture(mus, g.dens, g.post)
    out = np.empty((mus.shape[0], g.dens.shape[0]))
    for a in range(g.dens.shape[0]):
        out[:, a] = _pointwise_loss(g.post[a], h, loss) @ g.mass[a]
    if loss == "ce":
        _raise_if_infinite(out, "weight batch")
    return out


def risk_terms(spec: Spec, mu, loss: str = "bs", quad: QuadratureConfig = QuadratureConfig()) -> RiskTerms:
    """Group risks of the optimal predictor for ``mu`` with their decomposition.

    ``total`` is integrated directly from the expected loss; ``bayes`` and
    ``discrepancy`` are integrated separately, so ``total - bayes - discrepancy``
    measures only rounding.
    """
    loss = _check_loss(loss)
    mu = as_simplex(mu)
    g = _grid(spec, quad)
    h = _mixture(mu, g.dens, g.post)
    bayes = np.array([_bayes_pointwise(g.post[a], loss) @ g.mass[a] for a in range(spec.n_groups)])
    disc_pts = [np.where(g.mass[a] > 0, _discrepancy_pointwise(g.post[a], h, loss), 0.0) for a in range(spec.n_groups)]
    disc = np.array([d @ m for d, m in zip(disc_pts, g.mass)])
    total = np.array([_pointwise_loss(g.post[a], h, loss) @ g.mass[a] for a in range(spec.n_groups)])
    if loss == "ce":
        _raise_if_infinite(np.concatenate([disc, total]), f"mu={mu.tolist()}")
    # rounding can push an exactly-zero discrepancy a hair below zero
    disc = np.maximum(disc, 0.0)
    return RiskTerms(bayes, disc, total)


def group_risks(spec: Spec, mu, loss: str = "bs", quad: QuadratureConfig = QuadratureConfig()) -> np.ndarray:
    return risk_terms(spec, mu, loss, quad).total


def mixed_group_risks(spec: Spec, mu, gammas, loss: str = "bs",
                      quad: QuadratureConfig = QuadratureConfig()) -> np.ndarray:
    """Group risks when group ``a`` is served ``(1 - gamma_a) h_mu + gamma_a * uniform``."""
    loss = _check_loss(loss)
    mu = as_simplex(mu)
    gammas = np.broadcast_to(np.asarray(gammas, dtype=float), (spec.n_groups,))
    g = _grid(spec, quad)
    h = _mixture(mu, g.dens, g.post)
    out = np.empty(spec.n_groups)
    for a in range(spec.n_groups):
        ha = (1.0 - gammas[a]) * h + gammas[a] * 0.5
        out[a] = _pointwise_loss(g.post[a], ha, loss) @ g.mass[a]
    if loss == "ce":
        _raise_if_infinite(out, "mixed predictor")
    return out


class OracleSolver:
    """Closed-form linear-weighting solver for APStar.

    Returns ``(mu, risks)``; the weights themselves identify the optimal
    predictor through :func:`optimal_classifier`.
    """

    def __init__(self, spec: Spec, loss: str = "bs", quad: QuadratureConfig = QuadratureConfig()):
        self.spec = spec
        self.loss = _check_loss(loss)
        self._grid = _grid(spec, quad)
        self.calls = 0

    def __call__(self, mu):
        self.calls += 1
        mu = as_simplex(mu)
        return mu, _risk_batch(self._grid, mu[None, :], self.loss)[0]


# ---------------------------------------------------------------------------
# grid search and Pareto front


def simplex_lattice(n_groups: int, steps: int) -> np.ndarray:
    """All weight vectors with entries in ``{0, 1/steps, ..., 1}``, in lexicographic order."""
    if n_groups == 1:
        return np.ones((1, 1))

    def rec(parts, total):
        if parts == 1:
            return np.array([[total]])
        blocks = []
        for first in range(total + 1):
            rest = rec(parts - 1, total - first)
            blocks.append(np.hstack([np.full((rest.shape[0], 1), first), rest]))
        return np.vstack(blocks)

    return rec(n_groups, steps) / steps


def lattice_size(n_groups: int, steps: int) -> int:
    return math.comb(steps + n_groups - 1, n_groups - 1)


def default_resolution(n_groups: int) -> float:
    return 0.005 if n_groups <= 2 else 0.01


def grid_search_minimax(spec: Spec, loss: str = "bs", resolution: float | None = None,
                        quad: QuadratureConfig = QuadratureConfig(), max_points: int = 2_000_000,
                        chunk: int = 256, return_all: bool = False):
    """Lattice point minimising the worst group risk.

    Ties (within 1e-12 relative) go to the lexicographically smallest weights.
    """
    loss = _check_loss(loss)
    if resolution is None:
        resolution = default_resolution(spec.n_groups)
    steps = int(round(1.0 / resolution))
    if steps < 1 or abs(steps * resolution - 1.0) > 1e-9:
        raise ValueError(f"resolution {resolution} must divide 1")
    size = lattice_size(spec.n_groups, steps)
    if size > max_points:
        raise ResourceLimitError(
            f"{size} lattice points for {spec.n_groups} groups at resolution {resolution} exceeds {max_points}"
        )
    lattice = simplex_lattice(spec.n_groups, steps)
    g = _grid(spec, quad)
    risks = np.vstack([_risk_batch(g, lattice[i:i + chunk], loss) for i in range(0, lattice.shape[0], chunk)])
    minimax = risks.max(axis=1)
    best = minimax.min()
    tied = np.flatnonzero(minimax <= best + 1e-12 * max(1.0, abs(best)))
    i = int(tied[0])
    if return_all:
        return lattice[i], risks[i], lattice, risks
    return lattice[i], risks[i]


def _dominates_beyond(r1, r2, tol):
    return bool(np.all(r1 <= r2 + tol) and np.any(r1 < r2 - tol))


def pareto_front_trace(spec: Spec, loss: str = "bs", n_points: int = 101,
                       quad: QuadratureConfig = QuadratureConfig(), tol: float = 1e-12):
    """Sweep ``mu_0`` over ``n_points`` interior values and return ``(mu, risks)`` pairs.

    Raises ``ArithmeticError`` if any returned point dominates another by more
    than ``tol`` (quadrature rounding).
    """
    loss = _check_loss(loss)
    if spec.n_groups != 2:
        raise ValueError(f"Pareto front tracing supports exactly two groups, got {spec.n_groups}")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    mu0 = np.linspace(0.0, 1.0, n_points + 2)[1:-1]
    mus = np.column_stack([mu0, 1.0 - mu0])
    risks = _risk_batch(_grid(spec, quad), mus, loss)
    for i in range(n_points):
        for j in range(n_points):
            if i != j and _dominates_beyond(risks[i], risks[j], tol):
                raise ArithmeticError(f"front point {i} dominates point {j}: {risks[i]} vs {risks[j]}")
    return [(mus[i], risks[i]) for i in range(n_points)]


def is_mutually_nondominated(risks: Sequence[np.ndarray]) -> bool:
    return not any(dominates(r1, r2) for i, r1 in enumerate(risks) for j, r2 in enumerate(risks) if i != j)


# ---------------------------------------------------------------------------
# sampling


def sample_dataset(spec: Spec, n: int, seed: int = 0) -> GroupedDataset:
    """Draw ``n`` iid triplets ``(x, y, a)``; deterministic given ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    a = rng.choice(spec.n_groups, size=n, p=np.array(spec.priors))
    x = rng.standard_normal(n) + np.array(spec.means)[a]
    f = spec.posteriors(x)[a, np.arange(n)]
    y = (rng.random(n) < f).astype(np.int64)
    return GroupedDataset(x[:, None], y, a, n_classes=2, n_groups=spec.n_groups, feature_names=["x"])


# ---------------------------------------------------------------------------
# named specs and spec files


def reference_three_group_spec() -> GaussianPiecewiseSpec:
    """Three groups: means (-0.5, 0, 0.5), thresholds (-0.25, 0, 0.25)."""
    return GaussianPiecewiseSpec(
        means=(-0.5, 0.0, 0.5), thresholds=(-0.25, 0.0, 0.25), low=(0.1, 0.1, 0.1), high=(0.9, 0.9, 0.8)
    )


def two_group_tradeoff_spec() -> GaussianPiecewiseSpec:
    """Two groups with unequal label noise; its minimax point does not equalise risk."""
    return GaussianPiecewiseSpec(means=(-0.5, 0.5), thresholds=(-0.25, 0.25), low=(0.3, 0.05), high=(0.7, 0.95))


def load_spec(path) -> Spec:
    """Read a ``key = value`` spec file.

    Gaussian specs use ``means``, ``thresholds``, ``low``, ``high`` and an
    optional ``priors``; ``kind = sine_mix`` selects a two-group sine mixture
    with ``offset`` and ``flip``.
    """
    kv = parse_key_values(Path(path).read_text())
    kind = kv.get("kind", "gaussian").lower()

    def vec(key):
        if key not in kv:
            raise ValueError(f"spec file {path} is missing {key!r}")
        return tuple(float(v) for v in kv[key].replace(";", ",").split(",") if v.strip())

    if kind == "sine_mix":
        return SineMixSpec(offset=float(kv.get("offset", 0.0)), flip=float(kv.get("flip", 0.0)))
    if kind != "gaussian":
        raise ValueError(f"unknown spec kind {kind!r}")
    return GaussianPiecewiseSpec(
        means=vec("means"), thresholds=vec("thresholds"), low=vec("low"), high=vec("high"),
        priors=vec("priors") if "priors" in kv else None,
    )


def dump_spec(spec: Spec) -> str:
    if isinstance(spec, SineMixSpec):
        return f"kind = sine_mix\noffset = {spec.offset!r}\nflip = {spec.flip!r}\n"

    def fmt(v):
        return ", ".join(repr(float(x)) for x in v)

    return (f"kind = gaussian\nmeans = {fmt(spec.means)}\nthresholds = {fmt(spec.thresholds)}\n"
            f"low = {fmt(spec.low)}\nhigh = {fmt(spec.high)}\npriors = {fmt(spec.priors)}\n")


def write_risk_csv(rows, path) -> None:
    """CSV with header ``mu_0,...,r_0,...,minimax``."""
    rows = list(rows)
    n = len(rows[0][0])
    header = [f"mu_{i}" for i in range(n)] + [f"r_{i}" for i in range(n)] + ["minimax"]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for mu, r in rows:
            vals = [*np.asarray(mu).tolist(), *np.asarray(r).tolist(), float(np.max(r))]
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")
