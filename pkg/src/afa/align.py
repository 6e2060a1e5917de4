"""Distances, separation/clustering reports, nearest-neighbour analysis.

Every distance is evaluated in float64 with a fixed summation order: the
coordinates of a pair are folded left to right, one coordinate at a time,
vectorised across pairs.  A naive double loop that adds ``|a_k - b_k|`` in the
same order therefore reproduces the engine bit for bit, independent of how
rows are blocked.

Separation Min/Avg/Max aggregate over class pairs; clustering Min/Avg/Max
aggregate over query samples.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, ce_loss_fn, pgd
from .tensor import NonFiniteError, Tensor, get_default_dtype, no_grad

__all__ = [
    "Metric",
    "pairwise_distances",
    "distances_to_point",
    "SeparationReport",
    "ClusteringReport",
    "AlignmentVerdict",
    "LipschitzEstimate",
    "separation_factor",
    "clustering_factor",
    "alignment_verdict",
    "knn_predict",
    "knn_accuracy",
    "layer_accuracy_curve",
    "accordance_rate",
    "lipschitz_estimate",
    "minmax_normalize",
    "MODES",
]

MODES = ("train-train", "train-test", "train-adv")
_KINDS = {"l0": "l0", "l1": "l1", "l2": "l2", "linf": "linf", "inf": "linf", "l_inf": "linf"}


@dataclass(frozen=True)
class Metric:
    kind: str = "linf"
    l0_tolerance: float = 0.0

    def __post_init__(self):
        kind = _KINDS.get(str(self.kind).lower())
        if kind is None:
            raise ValueError(f"unknown metric {self.kind!r}; expected one of l0, l1, l2, linf")
        if self.l0_tolerance < 0:
            raise ValueError("l0 tolerance must be non-negative")
        object.__setattr__(self, "kind", kind)

    @classmethod
    def of(cls, value) -> "Metric":
        return value if isinstance(value, Metric) else cls(value)

    def __str__(self) -> str:
        return self.kind


def _as_rows(a) -> np.ndarray:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    return a.reshape(len(a), -1)


def _fold(acc: np.ndarray, diff: np.ndarray, kind: str, tol: float) -> None:
    if kind == "l1":
        acc += diff
    elif kind == "l2":
        acc += diff * diff
    elif kind == "linf":
        np.maximum(acc, diff, out=acc)
    else:
        acc += diff > tol


def pairwise_distances(a, b, metric="linf", block_elems: int = 1 << 22) -> np.ndarray:
    """``D[i, j] = dist(a_i, b_j)`` for flattened rows of ``a`` and ``b``."""
    metric = Metric.of(metric)
    a, b = _as_rows(a), _as_rows(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    n, m = len(a), len(b)
    out = np.zeros((n, m), dtype=np.float64)
    if n == 0 or m == 0:
        return out
    at, bt = np.ascontiguousarray(a.T), np.ascontiguousarray(b.T)
    step = max(1, block_elems // max(m, 1))
    for s in range(0, n, step):
        acc = out[s:s + step]
        for k in range(a.shape[1]):
            diff = np.abs(at[k, s:s + step, None] - bt[k][None, :])
            _fold(acc, diff, metric.kind, metric.l0_tolerance)
    if metric.kind == "l2":
        np.sqrt(out, out=out)
    return out


def distances_to_point(a, point, metric="linf") -> np.ndarray:
    return pairwise_distances(a, _as_rows(point), metric)[:, 0]


def minmax_normalize(*arrays):
    """Rescale arrays jointly so their union spans [0, 1]."""
    lo = min(float(np.min(x)) for x in arrays)
    hi = max(float(np.max(x)) for x in arrays)
    scale = (hi - lo) or 1.0
    out = tuple((np.asarray(x, dtype=np.float64) - lo) / scale for x in arrays)
    return out if len(out) > 1 else out[0]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class SeparationReport:
    pairs: dict
    metric: str
    mode: str

    @property
    def values(self) -> np.ndarray:
        return np.array([self.pairs[k] for k in sorted(self.pairs)], dtype=np.float64)

    @property
    def min(self) -> float:
        return float(self.values.min())

    @property
    def avg(self) -> float:
        return float(self.values.mean())

    @property
    def max(self) -> float:
        return float(self.values.max())

    def summary(self) -> dict:
        return {"metric": self.metric, "mode": self.mode, "min": self.min, "avg": self.avg, "max": self.max}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_i", "class_j", "min_distance"])
        for (i, j) in sorted(self.pairs):
            w.writerow([i, j, repr(self.pairs[(i, j)])])
        return buf.getvalue()


@dataclass
class ClusteringReport:
    per_sample: np.ndarray
    labels: np.ndarray
    metric: str
    mode: str
    singleton_classes: list = field(default_factory=list)

    @property
    def min(self) -> float:
        return float(self.per_sample.min())

    @property
    def avg(self) -> float:
        return float(self.per_sample.mean())

    @property
    def max(self) -> float:
        return float(self.per_sample.max())

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.per_sample))

    def summary(self) -> dict:
        return {"metric": self.metric, "mode": self.mode, "min": self.min, "avg": self.avg,
                "max": self.max, "singleton_classes": list(self.singleton_classes)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "label", "dist_max"])
        for i, (lab, v) in enumerate(zip(self.labels, self.per_sample)):
            w.writerow([i, int(lab), repr(float(v))])
        return buf.getvalue()


@dataclass
class AlignmentVerdict:
    r: float
    R: float
    aligned: bool
    witness: int | None = None

    def summary(self) -> dict:
        return {"r": self.r, "R": self.R, "aligned": self.aligned, "witness": self.witness,
                "verdict": "aligned" if self.aligned else "misaligned"}


def _check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown comparison mode {mode!r}; expected one of {MODES}")
    return mode


def separation_factor(x, y, ref_x=None, ref_y=None, metric="linf", mode: str | None = None,
                      distances: np.ndarray | None = None) -> SeparationReport:
    """Minimum cross-class distance for every unordered class pair.

    With a reference set the pair ``{i, j}`` takes the minimum over query class
    ``i`` against reference class ``j`` and query ``j`` against reference ``i``.
    """
    metric = Metric.of(metric)
    same = ref_x is None
    mode = _check_mode(mode or ("train-train" if same else "train-test"))
    y = np.asarray(y)
    ry = y if same else np.asarray(ref_y)
    classes = np.union1d(np.unique(y), np.unique(ry))
    if len(classes) < 2:
        raise ValueError("separation needs at least two classes")
    d = distances if distances is not None else pairwise_distances(x, x if same else ref_x, metric)
    pairs = {}
    for ii, ci in enumerate(classes):
        for cj in classes[ii + 1:]:
            best = np.inf
            for qa, rb in ((ci, cj), (cj, ci)):
                q, r = y == qa, ry == rb
                if q.any() and r.any():
                    best = min(best, float(d[np.ix_(q, r)].min()))
            if np.isfinite(best):
                pairs[(int(ci), int(cj))] = best
    if not pairs:
        raise ValueError("no class pair has samples on both sides")
    return SeparationReport(pairs, str(metric), mode)


def clustering_factor(x, y, ref_x=None, ref_y=None, metric="linf", mode: str | None = None,
                      distances: np.ndarray | None = None) -> ClusteringReport:
    """Per query sample, the largest distance to a same-class reference sample.

    When the reference set is the query set itself the sample is excluded from
    its own class; a singleton class then yields 0 and is listed in
    ``singleton_classes``.
    """
    metric = Metric.of(metric)
    same = ref_x is None
    mode = _check_mode(mode or ("train-train" if same else "train-test"))
    y = np.asarray(y)
    ry = y if same else np.asarray(ref_y)
    d = distances if distances is not None else pairwise_distances(x, x if same else ref_x, metric)
    out = np.zeros(len(y), dtype=np.float64)
    singletons = []
    for c in np.unique(y):
        q = np.flatnonzero(y == c)
        r = np.flatnonzero(ry == c)
        if len(r) == 0:
            raise ValueError(f"class {c} has no reference samples")
        block = d[np.ix_(q, r)]
        if same:
            if len(r) == 1:
                singletons.append(int(c))
                warnings.warn(f"class {c} is a singleton; its dist_max is reported as 0")
                continue
            block = block.copy()
            block[np.arange(len(q)), np.arange(len(q))] = -np.inf
        out[q] = block.max(axis=1)
    return ClusteringReport(out, y, str(metric), mode, singletons)


def alignment_verdict(sep: SeparationReport, clu: ClusteringReport) -> AlignmentVerdict:
    if sep.mode != clu.mode:
        raise ValueError(f"comparison modes differ: {sep.mode} vs {clu.mode}")
    if sep.metric != clu.metric:
        raise ValueError(f"metrics differ: {sep.metric} vs {clu.metric}")
    r, big_r = sep.min / 2.0, clu.max / 2.0
    aligned = r > big_r
    return AlignmentVerdict(r, big_r, aligned, None if aligned else clu.argmax)


# ---------------------------------------------------------------------------
# nearest neighbours
# ---------------------------------------------------------------------------

def knn_predict(query, train_x, train_y, k: int = 1, metric="linf", num_classes: int | None = None,
                exclude_self: bool = False, distances: np.ndarray | None = None):
    """k-NN labels plus each query's neighbour indices (nearest first).

    k = 1 takes the class whose nearest training sample is closest, lowest
    class index on ties.  k > 1 takes a majority vote, ties broken by the
    smaller summed neighbour distance and then the lower class index.
    ``exclude_self`` drops the diagonal when queries are the training set.
    """
    train_y = np.asarray(train_y)
    if len(train_y) == 0:
        raise ValueError("empty training set")
    if k < 1 or k > len(train_y) - (1 if exclude_self else 0):
        raise ValueError(f"k={k} invalid for {len(train_y)} training samples")
    n_cls = int(num_classes or train_y.max() + 1)
    d = distances if distances is not None else pairwise_distances(query, train_x, metric)
    if exclude_self:
        d = d.copy()
        np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    if k == 1:
        per_class = np.full((len(d), n_cls), np.inf)
        for c in range(n_cls):
            cols = train_y == c
            if cols.any():
                per_class[:, c] = d[:, cols].min(axis=1)
        return np.argmin(per_class, axis=1), order
    nd = np.take_along_axis(d, order, axis=1)
    labs = train_y[order]
    votes = np.zeros((len(d), n_cls), dtype=np.int64)
    dsum = np.zeros((len(d), n_cls), dtype=np.float64)
    for j in range(k):
        np.add.at(votes, (np.arange(len(d)), labs[:, j]), 1)
        np.add.at(dsum, (np.arange(len(d)), labs[:, j]), nd[:, j])
    pred = np.empty(len(d), dtype=np.int64)
    for i in range(len(d)):
        top = np.flatnonzero(votes[i] == votes[i].max())
        pred[i] = top[np.argmin(dsum[i, top])]  # argmin keeps the lowest class on exact ties
    return pred, order


def knn_accuracy(query, query_y, train_x, train_y, k: int = 1, metric="linf", **kw) -> float:
    pred, _ = knn_predict(query, train_x, train_y, k, metric, **kw)
    return float(np.mean(pred == np.asarray(query_y)))


def layer_accuracy_curve(model, train, test, metric="linf", attack: AttackConfig | None = None,
                         rng=None, layers=None, batch_size: int = 250):
    """1-NN accuracy of every captured layer plus the network's own accuracy.

    Returns a list of ``(layer, accuracy)`` where the layer is an int, then
    ``"penultimate"`` and finally ``"network"``.  With ``attack`` the queries
    are CE-PGD examples against the network.
    """
    qx = test.x
    if attack is not None:
        advs = []
        for s in range(0, len(qx), batch_size):
            yb = test.y[s:s + batch_size]
            advs.append(pgd(ce_loss_fn(model, yb), qx[s:s + batch_size], attack, rng, record_final=False).x_adv)
        qx = np.concatenate(advs)
    layers = list(range(1, model.spec.depth + 1)) if layers is None else list(layers)
    keys = layers + ["penultimate"]
    tr = model.activations(train.x, keys)
    te = model.activations(qx, keys)
    curve = []
    for key in keys:
        acc = knn_accuracy(te[key], test.y, tr[key], train.y, 1, metric, num_classes=train.num_classes)
        curve.append((key, acc))
    curve.append(("network", float(np.mean(model.predict(qx) == test.y))))
    return curve


def accordance_rate(model, train, queries, k: int = 1, metric="linf") -> float:
    """Fraction of queries whose penultimate k-NN vote equals the network prediction."""
    qx = queries.x if hasattr(queries, "x") else np.asarray(queries)
    tr = model.activations(train.x, ["penultimate"])["penultimate"]
    q = model.activations(qx, ["penultimate"])["penultimate"]
    pred, _ = knn_predict(q, tr, train.y, k, metric, num_classes=train.num_classes)
    return float(np.mean(pred == model.predict(qx)))


# ---------------------------------------------------------------------------
# empirical local Lipschitz constant
# ---------------------------------------------------------------------------

@dataclass
class LipschitzEstimate:
    K: float
    ratios: list
    worst_accuracy: float | None
    skipped: int = 0
    output_norm: str = "l1"
    input_norm: str = "linf"


def _norm_rows(t: Tensor, kind: str) -> Tensor:
    flat = t.flatten()
    if kind == "l1":
        return flat.abs().sum(axis=1)
    if kind == "linf":
        return flat.abs().max(axis=1)
    if kind == "l2":
        raise ValueError("l2 is not differentiable at 0 in this primitive set; use l1 or linf")
    raise ValueError(f"unknown norm {kind!r}")


def lipschitz_estimate(model, x, y=None, cfg: AttackConfig = AttackConfig(8 / 255, 2 / 255, 20),
                       rng=None, runs: int = 10, output_fn=None, output_norm: str = "l1",
                       input_norm: str = "linf") -> LipschitzEstimate:
    """Largest ``|f(x) - f(x')| / |x - x'|`` found by ``runs`` seeded PGD executions.

    ``f`` is the softmax output of ``model`` unless ``output_fn`` maps an
    input Tensor to outputs directly.  Probes with ``x' == x`` are skipped and
    counted in ``skipped``.
    """
    if cfg.epsilon <= 0:
        raise ValueError("Lipschitz probing needs epsilon > 0")
    if output_fn is None:
        def output_fn(xt):
            return model.logits(xt, detach=True).softmax()
    x = np.asarray(x, dtype=get_default_dtype())
    x_t = Tensor(x)
    with no_grad():
        fx = output_fn(x_t).data

    def ratio_rows(xt):
        num = _norm_rows(output_fn(xt) - fx, output_norm)
        den = _norm_rows(xt - x_t, input_norm)
        return num, den

    def objective(xt):
        num, den = ratio_rows(xt)
        if (den.data == 0).any():
            raise ZeroDivisionError
        return (num / den).sum()

    ratios, best_x, skipped = [], None, 0
    for _ in range(runs):
        try:
            res = pgd(objective, x, cfg, rng, record_final=False)
        except (ZeroDivisionError, NonFiniteError):
            skipped += 1
            continue
        with no_grad():
            num, den = ratio_rows(Tensor(res.x_adv))
        ok = den.data > 0
        skipped += int((~ok).sum())
        if not ok.any():
            continue
        r = float((num.data[ok] / den.data[ok]).max())
        ratios.append(r)
        if best_x is None or r >= max(ratios[:-1], default=-np.inf):
            best_x = res.x_adv
    K = max(ratios) if ratios else 0.0
    acc = None
    if model is not None and y is not None and best_x is not None:
        acc = float(np.mean(model.predict(best_x) == np.asarray(y)))
    return LipschitzEstimate(K, ratios, acc, skipped, output_norm, input_norm)
