"""Direct-parameter density fitting toys.

K free points (no network) chase a 1-D or 2-D target density: every
iteration draws one sample, finds the nearest point, and Adam-steps that
point toward the sample. With split-and-prune enabled the same match
counters drive node cloning/removal. Fit quality is scored as KL divergence
between the binned target and the node histogram.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import splitprune
from .tensor import AdamState, Parameter, adam_step


class Target1D:
    """Scalar density given as a pdf callable over a finite support."""

    kind = "pdf-1d"

    def __init__(self, pdf, support, sampler=None, name="pdf-1d"):
        self.pdf = pdf
        self.support = (float(support[0]), float(support[1]))
        self._sampler = sampler
        self.name = name

    @property
    def dim(self):
        return 1

    @property
    def bounding_box(self):
        lo, hi = self.support
        return np.array([[lo], [hi]], np.float64)

    def mass(self, lo, hi, points=64):
        """Integral of the (unnormalized) pdf over [lo, hi], midpoint rule."""
        if hi <= lo:
            return 0.0
        xs = lo + (np.arange(points) + 0.5) * (hi - lo) / points
        return float(np.sum(self.pdf(xs)) * (hi - lo) / points)

    def sample(self, rng, n):
        if self._sampler is not None:
            return np.asarray(self._sampler(rng, n), np.float64).reshape(n, 1)
        # inverse-CDF on a fine grid
        lo, hi = self.support
        grid = np.linspace(lo, hi, 4096)
        pdf = np.clip(self.pdf(grid), 0, None)
        cdf = np.cumsum(pdf)
        if cdf[-1] <= 0:
            raise ValueError("density has empty support")
        cdf /= cdf[-1]
        u = rng.random(n)
        return np.interp(u, cdf, grid).reshape(n, 1)

    def bin_masses(self, bins):
        lo, hi = self.support
        edges = np.linspace(lo, hi, bins + 1)
        p = np.array([self.mass(edges[i], edges[i + 1]) for i in range(bins)])
        total = p.sum()
        if total <= 0:
            raise ValueError("density has empty support")
        return p / total, edges


class Target2D:
    """Planar density given as a grayscale mass grid over a square extent."""

    kind = "density-image-2d"

    def __init__(self, grid, extent, name="density-image-2d"):
        grid = np.asarray(grid, np.float64)
        if grid.ndim != 2 or np.any(grid < 0):
            raise ValueError("density grid must be a non-negative 2-D array")
        if grid.sum() <= 0:
            raise ValueError("density has empty support")
        self.grid = grid / grid.sum()
        self.extent = tuple(float(v) for v in extent)  # (x0, x1, y0, y1)
        self.name = name

    @property
    def dim(self):
        return 2

    @property
    def bounding_box(self):
        x0, x1, y0, y1 = self.extent
        return np.array([[x0, y0], [x1, y1]], np.float64)

    def sample(self, rng, n):
        gy, gx = self.grid.shape
        flat = self.grid.reshape(-1)
        cells = rng.choice(flat.size, size=n, p=flat)
        iy, ix = np.divmod(cells, gx)
        x0, x1, y0, y1 = self.extent
        xs = x0 + (ix + rng.random(n)) * (x1 - x0) / gx
        ys = y0 + (iy + rng.random(n)) * (y1 - y0) / gy
        return np.stack([xs, ys], axis=1)

    def bin_masses(self, bins):
        gy, gx = self.grid.shape
        if gy % bins or gx % bins:
            raise ValueError(f"grid {self.grid.shape} not divisible into {bins} bins")
        fy, fx = gy // bins, gx // bins
        p = self.grid.reshape(bins, fy, bins, fx).sum(axis=(1, 3))
        return p, None


def gaussian_mixture_1d(weights, means, sigmas, support):
    weights = np.asarray(weights, np.float64)
    means = np.asarray(means, np.float64)
    sigmas = np.asarray(sigmas, np.float64)

    def pdf(x):
        x = np.asarray(x, np.float64)
        out = np.zeros_like(x)
        for w, m, s in zip(weights, means, sigmas):
            out += w * np.exp(-0.5 * ((x - m) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        return out

    def sampler(rng, n):
        comp = rng.choice(len(weights), size=n, p=weights / weights.sum())
        return rng.normal(means[comp], sigmas[comp])

    return Target1D(pdf, support, sampler=sampler)


def _gauss_grid(centers, sigmas, weights, extent, cells):
    x0, x1, y0, y1 = extent
    xs = x0 + (np.arange(cells) + 0.5) * (x1 - x0) / cells
    ys = y0 + (np.arange(cells) + 0.5) * (y1 - y0) / cells
    gx, gy = np.meshgrid(xs, ys)
    grid = np.zeros((cells, cells))
    for (cx, cy), s, w in zip(centers, sigmas, weights):
        grid += w * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * s * s))
    return grid


def builtin_target(name, cells=100):
    """Named toy densities used by tests and the CLI."""
    if name == "bimodal":
        return gaussian_mixture_1d([0.75, 0.25], [-1.0, 1.0], [0.1, 0.1], (-1.5, 1.5))
    if name == "bell":
        return gaussian_mixture_1d([1.0], [0.0], [1.0], (-4.0, 4.0))
    if name == "uniform":
        return Target1D(lambda x: np.where((x >= 0) & (x <= 1), 1.0, 0.0), (0.0, 1.0),
                        sampler=lambda rng, n: rng.random(n), name="uniform")
    if name == "gmm":
        grid = _gauss_grid([(-1.8, -1.0), (1.4, 1.8), (1.9, -1.7)],
                           [0.75, 0.9, 0.5], [0.5, 0.3, 0.2], (-4, 4, -4, 4), cells)
        return Target2D(grid, (-4, 4, -4, 4), name="gmm")
    if name == "ring":
        x0 = (-4, 4, -4, 4)
        xs = np.linspace(-4, 4, cells)
        gx, gy = np.meshgrid(xs, xs)
        r = np.sqrt(gx**2 + gy**2)
        return Target2D(np.exp(-((r - 2.2) ** 2) / (2 * 0.35**2)), x0, name="ring")
    raise ValueError(f"unknown builtin target {name!r}")


@dataclass
class KLReport:
    d_kl: float
    bins: int
    mode: str

    def to_json(self):
        return {"d_kl": self.d_kl, "bins": self.bins, "mode": self.mode}


@dataclass
class Snapshot:
    stage: str
    positions: np.ndarray
    boundaries: np.ndarray
    p: np.ndarray
    q: np.ndarray
    kl: float


@dataclass
class FitResult:
    cloud: "NodeCloud"
    events: list
    snapshots: list
    matches: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


class NodeCloud:
    """K direct-parameter points with their Adam and split/prune state."""

    def __init__(self, k, dim, rng, box, lr=0.01):
        lo, hi = box[0], box[1]
        init = rng.uniform(lo, hi, size=(k, dim)).astype(np.float32)
        self.points = Parameter(init, slot_axis=0, name="node-cloud")
        self.opt = AdamState(self.points.shape, lr=lr)
        self.sp_state = splitprune.SplitPruneState(k)

    @property
    def coords(self):
        return self.points.value.data

    @property
    def k(self):
        return self.points.shape[0]


def fit(target, k, iters=None, mode="split-prune", seed=0, lr=0.01,
        snapshot_stages=False):
    """Fit K nodes to a target density.

    mode: "split-prune" runs the full rebalancing; "grad-only" disables it.
    """
    if mode not in ("split-prune", "grad-only"):
        raise ValueError(f"unknown fit mode {mode!r}")
    iters = 10 * k if iters is None else int(iters)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    box = target.bounding_box
    cloud = NodeCloud(k, target.dim, rng, box, lr=lr)
    jitter = 1e-6 * float(np.max(box[1] - box[0]))

    events = []
    snaps = []
    matches = np.zeros(iters, np.int64)
    if snapshot_stages and target.dim == 1:
        snaps.append(_snapshot_1d("initial", cloud, target))
    for step in range(iters):
        x = target.sample(rng, 1)[0]
        d = cloud.coords.astype(np.float64) - x
        k_star = int(np.argmin(np.einsum("kd,kd->k", d, d)))
        matches[step] = k_star
        grad = np.zeros(cloud.points.shape, np.float32)
        grad[k_star] = 2.0 * d[k_star] / target.dim
        cloud.points.value.grad = grad
        adam_step([cloud.points], [cloud.opt])
        if mode == "split-prune":
            splitprune.record_match(cloud.sp_state, k_star)
            ev = splitprune.check_and_apply(cloud.sp_state, [(cloud.points, cloud.opt)],
                                            step=step)
            if ev is not None:
                # separate the clones immediately so nearest-node ties break
                cloud.coords[ev.pruned] += rng.normal(0, jitter, target.dim).astype(np.float32)
                events.append(ev)
                if snapshot_stages and target.dim == 1 and len(snaps) < 8:
                    snaps.append(_snapshot_1d(f"event-{len(events)}", cloud, target))
    if snapshot_stages and target.dim == 1:
        snaps.append(_snapshot_1d("final", cloud, target))
    return FitResult(cloud, events, snaps, matches)


def midpoint_boundaries(positions):
    """Interval boundaries between sorted 1-D node positions."""
    pos = np.sort(np.asarray(positions, np.float64).reshape(-1))
    return (pos[:-1] + pos[1:]) / 2.0


def interval_kl_1d(positions, mass_fn, support):
    """KL(P || Q) where P is the target mass per node interval (midpoint
    boundaries over the support) and Q gives every node mass 1/K."""
    pos = np.sort(np.asarray(positions, np.float64).reshape(-1))
    k = pos.size
    edges = np.concatenate(([support[0]], midpoint_boundaries(pos), [support[1]]))
    p = np.array([mass_fn(edges[i], edges[i + 1]) for i in range(k)])
    total = p.sum()
    if total <= 0:
        raise ValueError("density has empty support")
    p = p / total
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] * k)))


def _snapshot_1d(stage, cloud, target):
    pos = np.sort(cloud.coords[:, 0].astype(np.float64))
    edges = np.concatenate(([target.support[0]], midpoint_boundaries(pos),
                            [target.support[1]]))
    p = np.array([target.mass(edges[i], edges[i + 1]) for i in range(pos.size)])
    p = p / p.sum() if p.sum() > 0 else p
    q = np.full(pos.size, 1.0 / pos.size)
    kl = interval_kl_1d(pos, target.mass, target.support)
    return Snapshot(stage, pos, midpoint_boundaries(pos), p, q, kl)


def kl_divergence(points, target, bins=100, mode="split-prune", eps=1e-12):
    """KL(P || Q): P is the binned, normalized target; Q the node histogram
    with each node carrying mass 1/K, smoothed by eps."""
    points = np.asarray(points, np.float64)
    p, edges_1d = target.bin_masses(bins)
    if target.dim == 1:
        lo, hi = target.support
        clipped = np.clip(points[:, 0], lo, hi - 1e-12)
        counts, _ = np.histogram(clipped, bins=bins, range=(lo, hi))
    else:
        x0, x1, y0, y1 = target.extent
        cx = np.clip(points[:, 0], x0, x1 - 1e-12)
        cy = np.clip(points[:, 1], y0, y1 - 1e-12)
        counts, _, _ = np.histogram2d(cy, cx, bins=bins,
                                      range=[[y0, y1], [x0, x1]])
    q = counts.astype(np.float64) / points.shape[0] + eps
    nz = p > 0
    d_kl = float(np.sum(p[nz] * np.log(p[nz] / q.reshape(p.shape)[nz])))
    return KLReport(d_kl=d_kl, bins=bins, mode=mode)


def real_sample_kl(target, k, bins=100, seed=0):
    """Baseline: the empirical histogram of K fresh draws from the target."""
    rng = np.random.default_rng(seed)
    draws = target.sample(rng, k)
    return KLReport(kl_divergence(draws, target, bins=bins).d_kl, bins, "real-samples")


def illustrate_1d(target, k, iters=None, seed=0, lr=0.01):
    """Fit a 1-D target while recording stage snapshots for plotting."""
    result = fit(target, k, iters=iters, mode="split-prune", seed=seed, lr=lr,
                 snapshot_stages=True)
    return result.snapshots
