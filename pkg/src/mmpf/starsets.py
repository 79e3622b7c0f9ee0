"""Star-shaped descent regions on the 2-simplex, used to benchmark APStar.

Each region ``N_i`` is star-shaped around vertex ``i`` of the embedded
triangle. Its boundary is a piecewise-linear radius ``C_i(theta)``, where
``theta`` in ``[0, pi/3]`` is the angle from the edge ``i -> i+1``. A weight
vector is in ``N_i`` when its distance from vertex ``i`` is strictly below the
boundary radius at its angle. The vertex itself always belongs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import apstar_update

SQRT3 = math.sqrt(3.0)
THIRD_PI = math.pi / 3.0
VERTICES = np.array([[1.0, 0.0], [0.5, SQRT3 / 2.0], [0.0, 0.0]])
N_KNOTS = 7
TIMEOUT = -1


class SamplingError(RuntimeError):
    pass


def embed(mu) -> np.ndarray:
    """Map simplex weights (last axis of length 3) to the plane.

    ``(mu_0, mu_1, mu_2) -> ((2 mu_0 + mu_1) / 2, sqrt(3) mu_1 / 2)``.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape[-1] != 3:
        raise ValueError(f"embedding needs 3-group weights, got trailing dimension {mu.shape[-1]}")
    return np.stack([(2.0 * mu[..., 0] + mu[..., 1]) / 2.0, SQRT3 * mu[..., 1] / 2.0], axis=-1)


@dataclass(frozen=True)
class StarBoundary:
    theta: np.ndarray
    radius: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        radius = np.asarray(self.radius, dtype=float)
        if theta.shape != radius.shape or theta.size < 2:
            raise ValueError("boundary needs matching theta/radius knots (at least two)")
        if theta[0] != 0.0 or not math.isclose(theta[-1], THIRD_PI) or np.any(np.diff(theta) <= 0):
            raise ValueError("theta knots must increase strictly from 0 to pi/3")
        if np.any(radius < 0) or np.any(radius > 1):
            raise ValueError("radius knots must lie in [0, 1]")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "radius", radius)

    def __call__(self, angle):
        return np.interp(angle, self.theta, self.radius)

    @classmethod
    def constant(cls, r: float, n_knots: int = N_KNOTS) -> "StarBoundary":
        return cls(np.linspace(0.0, THIRD_PI, n_knots + 1), np.full(n_knots + 1, float(r)))

    @classmethod
    def sample(cls, rng: np.random.Generator, n_knots: int = N_KNOTS) -> "StarBoundary":
        inner = np.sort(rng.uniform(0.0, THIRD_PI, n_knots - 1))
        theta = np.concatenate([[0.0], inner, [THIRD_PI]])
        return cls(theta, rng.uniform(0.0, 1.0, n_knots + 1))


def polar_from_vertex(mu, i: int):
    """Distance from vertex ``i`` and angle measured from the edge towards vertex ``i+1``."""
    p = embed(mu) - VERTICES[i]
    edge = VERTICES[(i + 1) % 3] - VERTICES[i]
    dist = np.hypot(p[..., 0], p[..., 1])
    cross = edge[0] * p[..., 1] - edge[1] * p[..., 0]
    dot = edge @ np.moveaxis(p, -1, 0)
    angle = np.abs(np.arctan2(cross, dot))
    return dist, angle


@dataclass
class StarSetFamily:
    boundaries: tuple[StarBoundary, StarBoundary, StarBoundary]
    seed: int | None = None
    attempts: int = 1
    skipped_before: int = 0
    _ratio: float | None = field(default=None, repr=False)

    def member_matrix(self, mu) -> np.ndarray:
        """Boolean array ``(..., 3)``: entry ``i`` is true when the point lies in ``N_i``."""
        mu = np.asarray(mu, dtype=float)
        cols = []
        for i, c in enumerate(self.boundaries):
            dist, angle = polar_from_vertex(mu, i)
            cols.append((dist < c(angle)) | (dist == 0.0))
        return np.stack(cols, axis=-1)

    def in_all(self, mu) -> np.ndarray:
        return self.member_matrix(mu).all(axis=-1)

    def edge_sums(self) -> np.ndarray:
        c = self.boundaries
        return np.array([c[i](0.0) + c[(i + 1) % 3](THIRD_PI) for i in range(3)])

    def intersection_ratio(self, n_samples: int = 100_000, seed: int = 12345) -> float:
        """Monte-Carlo fraction of the simplex inside all three regions (cached)."""
        if self._ratio is None:
            pts = np.random.default_rng(seed).dirichlet(np.ones(3), size=n_samples)
            self._ratio = float(self.in_all(pts).mean())
        return self._ratio


def membership(family: StarSetFamily, mu) -> set[int]:
    return {i for i, inside in enumerate(family.member_matrix(mu)) if inside}


def barycentric_lattice(steps: int = 199) -> np.ndarray:
    i, j = np.meshgrid(np.arange(steps + 1), np.arange(steps + 1), indexing="ij")
    keep = i + j <= steps
    i, j = i[keep], j[keep]
    return np.column_stack([i, j, steps - i - j]) / steps


_POLAR_CACHE: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _lattice_polar(steps: int):
    """Lattice points with their (distance, angle) from every vertex, cached per resolution."""
    if steps not in _POLAR_CACHE:
        pts = barycentric_lattice(steps)
        polar = [polar_from_vertex(pts, i) for i in range(3)]
        _POLAR_CACHE[steps] = (pts, np.stack([d for d, _ in polar]), np.stack([t for _, t in polar]))
    return _POLAR_CACHE[steps]


def _batched_interp(angle: np.ndarray, theta: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Evaluate piecewise-linear boundaries ``(S, K+1)`` at shared angles ``(L,)`` -> ``(S, L)``."""
    idx = (angle[None, :, None] >= theta[:, None, 1:-1]).sum(axis=-1)
    rows = np.arange(theta.shape[0])[:, None]
    t0, t1 = theta[rows, idx], theta[rows, idx + 1]
    r0, r1 = radius[rows, idx], radius[rows, idx + 1]
    return r0 + (r1 - r0) * (angle[None, :] - t0) / (t1 - t0)


def _valid_on_lattice(theta: np.ndarray, radius: np.ndarray, steps: int) -> np.ndarray:
    """Coverage and non-empty intersection for ``S`` candidate families; ``theta``/``radius`` are ``(S, 3, K+1)``."""
    _, dist, angle = _lattice_polar(steps)
    inside = np.stack(
        [(dist[i][None, :] < _batched_interp(angle[i], theta[:, i], radius[:, i])) | (dist[i][None, :] == 0.0)
         for i in range(3)],
        axis=-1,
    )
    return inside.any(axis=-1).all(axis=-1) & inside.all(axis=-1).any(axis=-1)


def family_is_valid(family: StarSetFamily, lattice_steps: int = 199) -> bool:
    """Edge sums exceed 1, the union covers every lattice point, the intersection is non-empty."""
    if np.any(family.edge_sums() <= 1.0):
        return False
    theta = np.stack([b.theta for b in family.boundaries])[None]
    radius = np.stack([b.radius for b in family.boundaries])[None]
    return bool(_valid_on_lattice(theta, radius, lattice_steps)[0])


def full_family() -> StarSetFamily:
    return StarSetFamily(tuple(StarBoundary.constant(1.0) for _ in range(3)))


def sample_family(seed: int, max_attempts: int = 10_000, batch: int = 512, lattice_steps: int = 199) -> StarSetFamily:
    """Sample three random boundaries, rejecting until the validity checks pass.

    Candidates are drawn in batches. The edge-sum test needs only the end
    knots and the coarse lattice screens most of the rest, so the fine lattice
    runs on few candidates. The first valid candidate in draw order wins.
    """
    rng = np.random.default_rng(seed)
    done = 0
    while done < max_attempts:
        b = min(batch, max_attempts - done)
        inner = np.sort(rng.uniform(0.0, THIRD_PI, (b, 3, N_KNOTS - 1)), axis=-1)
        radius = rng.uniform(0.0, 1.0, (b, 3, N_KNOTS + 1))
        theta = np.concatenate([np.zeros((b, 3, 1)), inner, np.full((b, 3, 1), THIRD_PI)], axis=-1)
        cand = np.flatnonzero(np.all(radius[:, :, 0] + np.roll(radius[:, :, -1], -1, axis=1) > 1.0, axis=1))
        if cand.size:
            cand = cand[_valid_on_lattice(theta[cand], radius[cand], 30)]
        for j in cand:
            if _valid_on_lattice(theta[j:j + 1], radius[j:j + 1], lattice_steps)[0]:
                bounds = tuple(StarBoundary(theta[j, i], radius[j, i]) for i in range(3))
                return StarSetFamily(bounds, seed=seed, attempts=done + int(j) + 1)
        done += b
    raise SamplingError(f"no valid star-set family after {max_attempts} attempts (seed {seed})")


# ---------------------------------------------------------------------------
# strategies


@dataclass(frozen=True)
class APStarStrategy:
    alpha: float = 0.5
    k_min: int = 1
    name: str = "apstar"


@dataclass(frozen=True)
class RandomStrategy:
    seed: int = 0
    name: str = "random"


@dataclass(frozen=True)
class MWUStrategy:
    eta: float = 0.5
    name: str = "mwu"


def race(family: StarSetFamily, mu0, strategy, max_iters: int = 10_000, return_path: bool = False):
    """Iterations until a strategy proposes a point inside all three regions.

    Returns ``TIMEOUT`` (-1) when ``max_iters`` proposals fail. The violation
    mask driving APStar and MWU marks groups whose region excludes the
    current point.
    """
    mu = np.asarray(mu0, dtype=float)
    path = [mu.copy()]
    inside = family.member_matrix(mu)
    if inside.all():
        return (0, path) if return_path else 0

    if isinstance(strategy, RandomStrategy):
        rng = np.random.default_rng(strategy.seed)
        done = 0
        while done < max_iters:
            batch = rng.dirichlet(np.ones(3), size=min(1024, max_iters - done))
            hits = np.flatnonzero(family.in_all(batch))
            if hits.size:
                it = done + int(hits[0]) + 1
                if return_path:
                    path.extend(batch[:hits[0] + 1])
                return (it, path) if return_path else it
            done += batch.shape[0]
        return (TIMEOUT, path) if return_path else TIMEOUT

    k = 1
    for it in range(1, max_iters + 1):
        violated = ~inside
        if isinstance(strategy, APStarStrategy):
            mu = apstar_update(mu, violated, k, strategy.alpha)
            k += 1
        elif isinstance(strategy, MWUStrategy):
            mu = mu * np.exp(strategy.eta * violated)
            mu = mu / mu.sum()
        else:
            raise TypeError(f"unknown strategy {strategy!r}")
        if return_path:
            path.append(mu.copy())
        inside = family.member_matrix(mu)
        if inside.all():
            return (it, path) if return_path else it
    return (TIMEOUT, path) if return_path else TIMEOUT


class StarSetSolver:
    """Risk surrogate for ``run_apstar``: risk 1 for groups whose region excludes ``mu``, else 0."""

    def __init__(self, family: StarSetFamily):
        self.family = family

    def __call__(self, mu):
        return mu, (~self.family.member_matrix(mu)).astype(float)


def sample_start(family: StarSetFamily, rng: np.random.Generator, max_tries: int = 100_000) -> np.ndarray:
    for _ in range(max_tries):
        mu = rng.dirichlet(np.ones(3))
        if not family.in_all(mu):
            return mu
    raise SamplingError("could not find a start point outside the triple intersection")


# ---------------------------------------------------------------------------
# benchmark

RATIO_BINS = (0.0, 0.01, 0.025, 0.05, 0.10, 0.25, 1.0 + 1e-12)


def default_strategies(seed: int = 0):
    return (APStarStrategy(), RandomStrategy(seed), MWUStrategy())


def accepted_families(n_families: int, seed: int = 0, max_attempts: int = 10_000):
    """Yield ``n_families`` valid families from consecutive family seeds.

    Seeds whose rejection budget runs out are skipped; the skip count is
    attached to each family as ``skipped_before``.
    """
    produced = skipped = 0
    fam_seed = seed * 1_000_003
    while produced < n_families:
        try:
            fam = sample_family(fam_seed, max_attempts)
        except SamplingError:
            skipped += 1
        else:
            fam.skipped_before = skipped
            produced += 1
            yield fam
        fam_seed += 1


def run_benchmark(n_families: int, seed: int = 0, strategies=None, max_iters: int = 10_000):
    """Race every strategy on ``n_families`` sampled families.

    Returns a list of row dicts ``{seed, ratio, strategy, iterations, timeout_flag}``.
    """
    rows = []
    for f, fam in enumerate(accepted_families(n_families, seed)):
        fam_seed = fam.seed
        ratio = fam.intersection_ratio()
        rng = np.random.default_rng([seed, f, 1])
        mu0 = sample_start(fam, rng)
        strats = strategies or default_strategies(fam_seed)
        for strat in strats:
            if isinstance(strat, RandomStrategy):
                strat = RandomStrategy(seed=fam_seed)
            it = race(fam, mu0, strat, max_iters)
            rows.append({
                "seed": fam_seed,
                "ratio": ratio,
                "strategy": strat.name,
                "iterations": it if it != TIMEOUT else max_iters,
                "timeout_flag": int(it == TIMEOUT),
            })
    return rows


def summarize(rows, bins=RATIO_BINS) -> dict:
    """Per ratio-bin medians of iteration counts for each strategy."""
    out = {"bins": []}
    strategies = sorted({r["strategy"] for r in rows})
    for lo, hi in zip(bins[:-1], bins[1:]):
        entry = {"lo": lo, "hi": min(hi, 1.0), "n_families": 0, "median": {}, "timeouts": {}}
        for s in strategies:
            its = [r["iterations"] for r in rows if r["strategy"] == s and lo <= r["ratio"] < hi]
            entry["n_families"] = len(its)
            entry["median"][s] = float(np.median(its)) if its else None
            entry["timeouts"][s] = sum(r["timeout_flag"] for r in rows if r["strategy"] == s and lo <= r["ratio"] < hi)
        out["bins"].append(entry)
    return out
