"""k-fold multiview batches for contrastive training.

A view set is a tuple of tokens, one per view of each source:

    "x"    the untouched original        "x+d"  original, adversarial slot
    "T"    a random transformation       "T+d"  transformed, adversarial slot

Rows are source-major: source i occupies rows ``k*i .. k*i + k - 1``.
``VIEW_SETS`` holds the named sets compared in the view ablation; ``"afa"``
is the default ``{x+d1, T1(x)+d2, T2(x)}`` composition.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..losses import ContrastiveBatch
from .augment import AugmentPipeline, VectorJitter, augment

__all__ = ["MultiviewBatch", "build_multiview", "VIEW_SETS", "parse_views"]

VIEW_SETS = {
    "afa": ("x+d", "T+d", "T"),
    "t_adv-t": ("T+d", "T"),
    "t_adv-t_adv": ("T+d", "T+d"),
    "x_adv-t-t": ("x+d", "T", "T"),
}
_TOKENS = {"x", "x+d", "T", "T+d"}


@dataclass(frozen=True)
class MultiviewBatch:
    views: np.ndarray
    labels: np.ndarray
    source_index: np.ndarray
    view_kind: np.ndarray  # "original" | "transformed" per row
    adv_mask: np.ndarray
    k: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def adv_rows(self) -> np.ndarray:
        return np.flatnonzero(self.adv_mask)

    @property
    def clean_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.adv_mask)

    def contrastive(self) -> ContrastiveBatch:
        view_index = np.tile(np.arange(self.k), len(self) // self.k)
        return ContrastiveBatch(self.labels, self.source_index, view_index)


def parse_views(views) -> tuple[str, ...]:
    if isinstance(views, str):
        if views not in VIEW_SETS:
            raise ValueError(f"unknown view set {views!r}; known: {sorted(VIEW_SETS)}")
        return VIEW_SETS[views]
    views = tuple(views)
    bad = [v for v in views if v not in _TOKENS]
    if bad:
        raise ValueError(f"unknown view tokens {bad}; expected a subset of {sorted(_TOKENS)}")
    if len(views) < 2:
        raise ValueError("a multiview batch needs at least 2 views per source")
    return views


def _transform_fn(transform, sample_ndim: int):
    if transform is None:
        transform = AugmentPipeline() if sample_ndim == 3 else VectorJitter()
    if isinstance(transform, AugmentPipeline):
        return lambda img, seed, index: augment(img, transform, seed, index)
    return transform


def build_multiview(x, y, k: int | None = None, mode: str = "plain", transform=None, seed: int = 0,
                    source_ids=None, views=None) -> MultiviewBatch:
    """Replicate each source into its views.

    ``mode="plain"`` gives ``k`` independent transforms per source;
    ``mode="afa"`` uses ``views`` (default ``VIEW_SETS["afa"]``).  The random
    transform of view slot ``j`` of source id ``s`` is seeded by
    ``(seed, s * k + j)`` so a batch is reproducible from its ids alone.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} samples but {len(y)} labels")
    if mode == "plain":
        if k is None or k < 2:
            raise ValueError("plain multiview needs k >= 2")
        tokens = ("T",) * int(k)
    elif mode == "afa":
        tokens = parse_views(VIEW_SETS["afa"] if views is None else views)
        if k is not None and k != len(tokens):
            raise ValueError(f"k={k} does not match the {len(tokens)}-view set {tokens}")
    else:
        raise ValueError(f"unknown multiview mode {mode!r}")
    k = len(tokens)
    ids = np.arange(len(x)) if source_ids is None else np.asarray(source_ids, dtype=np.int64)
    fn = _transform_fn(transform, x.ndim - 1)

    rows = []
    for i in range(len(x)):
        for j, tok in enumerate(tokens):
            if tok.startswith("T"):
                rows.append(fn(x[i], seed, int(ids[i]) * k + j))
            else:
                rows.append(x[i].copy())
    views_arr = np.stack(rows) if rows else np.zeros((0,) + x.shape[1:], dtype=x.dtype)
    kinds = np.array(["original" if t.startswith("x") else "transformed" for t in tokens])
    adv = np.array([t.endswith("+d") for t in tokens])
    return MultiviewBatch(
        views=views_arr,
        labels=np.repeat(y, k),
        source_index=np.repeat(np.arange(len(x)), k),
        view_kind=np.tile(kinds, len(x)),
        adv_mask=np.tile(adv, len(x)),
        k=k,
    )
