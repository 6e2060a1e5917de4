"""Synthetic class-ball datasets with certified separation and clustering.

Each class lives in a metric ball around its centre.  Centres sit on a
jittered grid whose spacing guarantees, under L1, L2 and L-inf alike, that
any two balls of radius ``R`` are at least ``2r`` apart.  Points are drawn by
rejection: a proposal near the ball is kept only if its measured distance to
the centre is within the radius, so the radii hold exactly rather than in
distribution.

Modes
-----
``aligned``     train and test in R-balls, r > R.
``theorem``     train in R'-balls, test in R-balls, r > R'.
``misaligned``  train in R'-balls, test in R-balls, r <= R'; a witness test
                point is placed so that its nearest training point has the
                wrong class.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..align import Metric, distances_to_point, pairwise_distances
from .dataset import Dataset

__all__ = ["SyntheticSpec", "Certificate", "InfeasibleSpecError", "gen_synthetic", "gaussian_mixture"]

MODES = ("aligned", "theorem", "misaligned")


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 2
    dim: int = 2
    radius: float = 0.5            # R
    separation: float = 1.0        # r
    train_radius: float | None = None  # R', defaults to R
    train_per_class: int = 20
    test_per_class: int = 20
    metric: str = "l2"
    mode: str = "aligned"
    center_spacing: float | None = None  # defaults to 2r + 2R
    seed: int = 0

    @property
    def r_train(self) -> float:
        return self.radius if self.train_radius is None else self.train_radius

    @property
    def spacing(self) -> float:
        need = 2 * self.separation + 2 * self.radius
        return need if self.center_spacing is None else self.center_spacing

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InfeasibleSpecError(f"unknown mode {self.mode!r}")
        if Metric.of(self.metric).kind == "l0":
            raise InfeasibleSpecError("synthetic balls need a norm metric (l1, l2 or linf)")
        if self.num_classes < 2 or self.dim < 1:
            raise InfeasibleSpecError("need at least two classes and one dimension")
        if min(self.train_per_class, self.test_per_class) < 1:
            raise InfeasibleSpecError("need at least one sample per class and split")
        if not (self.radius > 0 and self.separation > 0):
            raise InfeasibleSpecError("radius and separation must be positive")
        if not 0 < self.r_train <= self.radius:
            raise InfeasibleSpecError(f"violated 0 < R' <= R (R'={self.r_train}, R={self.radius})")
        need = 2 * self.separation + 2 * self.radius
        if self.spacing < need:
            raise InfeasibleSpecError(
                f"violated center_spacing >= 2r + 2R ({self.spacing} < {need})")
        if self.mode == "aligned" and not self.separation > self.radius:
            raise InfeasibleSpecError(f"aligned mode violated r > R ({self.separation} <= {self.radius})")
        if self.mode == "theorem" and not self.separation > self.r_train:
            raise InfeasibleSpecError(f"theorem mode violated r > R' ({self.separation} <= {self.r_train})")
        if self.mode == "misaligned":
            if not self.separation <= self.r_train:
                raise InfeasibleSpecError(f"misaligned mode violated r <= R' ({self.separation} > {self.r_train})")
            if self.dim < 1 or self.num_classes < 2:
                raise InfeasibleSpecError("misaligned mode needs two classes")


@dataclass
class Certificate:
    min_separation: float          # min distance between different classes, train and test pooled
    max_clustering: float          # max within-class distance, train and test pooled
    train_max_radius: float
    test_max_radius: float
    aligned: bool                  # min_separation / 2 > max_clustering / 2
    witness: int | None = None     # test index whose nearest training point is wrong-class
    checks: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _propose(rng, kind: str, radius: float, dim: int, count: int) -> np.ndarray:
    """Points near-uniform in the ball; exactness is enforced by the caller's rejection step."""
    if kind == "linf":
        return rng.uniform(-radius, radius, size=(count, dim))
    u = rng.random(count) ** (1.0 / dim)
    if kind == "l2":
        g = rng.normal(size=(count, dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return g * (radius * u)[:, None]
    e = rng.exponential(size=(count, dim))
    signs = rng.choice([-1.0, 1.0], size=(count, dim))
    return signs * e / e.sum(axis=1, keepdims=True) * (radius * u)[:, None]


def _sample_ball(rng, center, radius, count, metric: Metric, accept=None) -> np.ndarray:
    out = []
    tries = 0
    while sum(len(o) for o in out) < count:
        tries += 1
        if tries > 10000:
            raise InfeasibleSpecError("rejection sampler could not fill the ball region")
        cand = center + _propose(rng, metric.kind, radius, len(center), 2 * count)
        keep = distances_to_point(cand, center, metric) <= radius
        if accept is not None:
            keep &= accept(cand)
        out.append(cand[keep])
    return np.concatenate(out)[:count]


def _grid_centers(rng, n: int, dim: int, spacing: float, jitter: float) -> np.ndarray:
    # distinct integer grid cells, L-inf gap >= 1 cell; jitter stays within
    # jitter/2 per coordinate so every norm keeps the spacing
    side = 2
    while side ** dim < n:
        side += 1
    side += 1
    cells = set()
    while len(cells) < n:
        cells.add(tuple(int(v) for v in rng.integers(0, side, size=dim)))
    grid = np.array(sorted(cells), dtype=np.float64)
    rng.shuffle(grid)
    jit = rng.uniform(-jitter / 2, jitter / 2, size=grid.shape) if jitter else 0.0
    return grid * (spacing + jitter) + jit


def gen_synthetic(spec: SyntheticSpec):
    """Return ``(train, test, certificate)`` for ``spec``."""
    spec.validate()
    metric = Metric.of(spec.metric)
    rng = np.random.default_rng(spec.seed)
    n_cls, dim = spec.num_classes, spec.dim
    R, Rt, D = spec.radius, spec.r_train, spec.spacing
    train_x, train_y, test_x, test_y = [], [], [], []
    witness = None

    if spec.mode == "misaligned":
        centers = _grid_centers(rng, n_cls, dim, 3 * D, 0.0)
        # classes 0 and 1 face each other along the first axis at exactly D
        e1 = np.zeros(dim)
        e1[0] = 1.0
        centers[1] = centers[0] + D * e1
    else:
        centers = _grid_centers(rng, n_cls, dim, D, 0.1 * D)

    for c in range(n_cls):
        train_r = R if spec.mode == "aligned" else Rt
        if spec.mode == "misaligned" and c == 1:
            tx, wx = _misaligned_pair(rng, spec, centers, metric)
            train_x.append(tx)
            test_rest = _sample_ball(rng, centers[1], R, spec.test_per_class - 1, metric)
            witness = sum(len(t) for t in test_x)
            test_x.append(np.vstack([wx[None, :], test_rest]))
        else:
            train_x.append(_sample_ball(rng, centers[c], train_r, spec.train_per_class, metric))
            test_x.append(_sample_ball(rng, centers[c], R, spec.test_per_class, metric))
        train_y.append(np.full(spec.train_per_class, c))
        test_y.append(np.full(spec.test_per_class, c))

    if spec.mode == "misaligned":
        # the wrong-class partner of the witness sits on class 0's inner face
        e1 = np.zeros(dim)
        e1[0] = 1.0
        train_x[0][0] = centers[0] + Rt * e1

    meta = {"generator": "synthetic", "spec": asdict(spec), "centers": centers.tolist()}
    train = Dataset(np.concatenate(train_x), np.concatenate(train_y), "train", n_cls, False, dict(meta))
    test = Dataset(np.concatenate(test_x), np.concatenate(test_y), "test", n_cls, False, dict(meta))
    cert = certify(train, test, centers, spec, witness)
    return train, test, cert


def _misaligned_pair(rng, spec: SyntheticSpec, centers, metric: Metric):
    """Class-1 training points plus the witness test point.

    The witness is the point of class 1's R-ball nearest class 0.  Its
    wrong-class partner (class 0's R'-ball point facing it) is at distance
    2r + R - R'.  Every class-1 training point is kept at least that far away,
    which is possible exactly when r <= R'; at r == R' the tie goes to the
    lower class index, i.e. to class 0.
    """
    dim = spec.dim
    R, Rt, r = spec.radius, spec.r_train, spec.separation
    e1 = np.zeros(dim)
    e1[0] = 1.0
    c1 = centers[1]
    wit = c1 - R * e1
    partner = centers[0] + Rt * e1
    limit = distances_to_point(wit[None, :], partner, metric)[0]
    if r == Rt:
        far = c1 + Rt * e1
        return np.repeat(far[None, :], spec.train_per_class, axis=0), wit
    # offset along e1 of at least s_min keeps |witness - p| >= R + s_min > limit
    s_min = 2 * r - Rt + 0.5 * (Rt - r)

    pts = []
    need = spec.train_per_class - 1
    for _ in range(10000):
        if sum(len(p) for p in pts) >= need:
            break
        # propose inside the cap {offset along e1 >= s_min} directly
        s = rng.uniform(s_min, Rt, size=2 * need + 1)
        if metric.kind == "linf":
            budget = np.full_like(s, Rt)
        elif metric.kind == "l2":
            budget = np.sqrt(np.maximum(Rt * Rt - s * s, 0.0))
        else:
            budget = np.maximum(Rt - np.abs(s), 0.0)
        cand = np.zeros((len(s), dim))
        cand[:, 0] = s
        if dim > 1:
            unit = _propose(rng, metric.kind, 1.0, dim - 1, len(s))
            cand[:, 1:] = unit * budget[:, None]
        cand += c1
        keep = (distances_to_point(cand, c1, metric) <= Rt) & (cand[:, 0] - c1[0] >= s_min)
        keep &= distances_to_point(cand, wit, metric) > limit
        pts.append(cand[keep])
    pts = np.concatenate(pts)[:need] if need else np.zeros((0, dim))
    if len(pts) < need:
        raise InfeasibleSpecError("could not place class-1 training points away from the witness")
    far = c1 + Rt * e1
    return np.vstack([far[None, :], pts]), wit


def certify(train: Dataset, test: Dataset, centers, spec: SyntheticSpec, witness=None) -> Certificate:
    metric = Metric.of(spec.metric)
    x = np.concatenate([train.x, test.x])
    y = np.concatenate([train.y, test.y])
    d = pairwise_distances(x, x, metric)
    cross = y[:, None] != y[None, :]
    same = ~cross
    np.fill_diagonal(same, False)
    min_sep = float(d[cross].min())
    max_clu = float(d[same].max()) if same.any() else 0.0
    tr_rad = max(float(distances_to_point(train.x[train.y == c], centers[c], metric).max())
                 for c in range(spec.num_classes))
    te_rad = max(float(distances_to_point(test.x[test.y == c], centers[c], metric).max())
                 for c in range(spec.num_classes))
    # spec targets are met up to rounding of the constructed coordinates; the
    # reported values themselves are exact measurements
    slack = 1e-9 * max(1.0, spec.spacing)
    checks = {
        "separation >= 2r": min_sep >= 2 * spec.separation - slack,
        "train within R'": tr_rad <= (spec.radius if spec.mode == "aligned" else spec.r_train) + slack,
        "test within R": te_rad <= spec.radius + slack,
    }
    if witness is not None:
        dw = pairwise_distances(test.x[witness:witness + 1], train.x, metric)[0]
        own = dw[train.y == test.y[witness]].min()
        other = dw[train.y != test.y[witness]].min()
        lower = train.y[np.argmin(np.where(train.y != test.y[witness], dw, np.inf))] < test.y[witness]
        checks["witness nearer wrong class"] = bool(other < own or (other == own and lower))
    cert = Certificate(min_sep, max_clu, tr_rad, te_rad, min_sep / 2 > max_clu / 2, witness, checks)
    failed = [k for k, ok in checks.items() if not ok]
    if failed:
        raise InfeasibleSpecError(f"certificate failed: {failed}")
    if spec.mode == "aligned" and not cert.aligned:
        raise InfeasibleSpecError("aligned mode produced r <= R after sampling")
    return cert


def gaussian_mixture(n_per_class: int, num_classes: int = 2, dim: int = 2, spread: float = 1.0,
                     sigma: float = 0.8, seed: int = 0, split: str = "train") -> Dataset:
    """Isotropic Gaussian classes with means on a circle of radius ``spread``."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = spread * np.cos(angles)
    if dim > 1:
        means[:, 1] = spread * np.sin(angles)
    x = np.concatenate([means[c] + sigma * rng.normal(size=(n_per_class, dim)) for c in range(num_classes)])
    y = np.repeat(np.arange(num_classes), n_per_class)
    perm = rng.permutation(len(y))
    return Dataset(x[perm], y[perm], split, num_classes, False, {"generator": "gaussian_mixture"})
