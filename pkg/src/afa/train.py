"""Training loops: cross-entropy, adversarial and contrastive strategies.

Every strategy shares one loop (``train``): sample a batch, build whatever
views and perturbations the strategy needs, form the loss, SGD step.  The
per-strategy work lives in small ``_step_*`` functions returning the loss
tensor plus the scalar components that go into the history.

Parameter groups follow ``nn``: ``g`` (extractor), ``phi`` (projection head)
and ``h`` (linear classifier).  Contrastive pre-training touches ``g`` and
``phi`` only; linear fine-tuning touches ``h`` only.

Randomness is split into independent streams derived from ``cfg.seed``:
batch order, augmentation and attack starts.  Parameter initialisation is
owned by the model's own seed.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, AttackError, ce_loss_fn, kl_loss_fn, pgd, robust_accuracy
from .data.augment import AugmentPipeline, VectorJitter
from .data.dataset import Dataset
from .data.multiview import MultiviewBatch, build_multiview, parse_views
from .losses import (ContrastiveBatch, LossConfig, afa_loss, contrastive_sup, cross_entropy,
                     kl_divergence)
from .nn import Model
from .tensor import NonFiniteError, Tensor, concat, no_grad, take

__all__ = [
    "STRATEGIES",
    "Schedule",
    "TrainConfig",
    "FinetuneMode",
    "TrainHistory",
    "EpochRecord",
    "SGD",
    "TrainingDivergedError",
    "class_balanced_batches",
    "train",
    "train_natural",
    "train_pgd_at",
    "train_trades",
    "pretrain_supcon",
    "pretrain_afa",
    "train_joint_afa_trades",
    "train_ablation",
    "finetune",
]

STRATEGIES = ("natural", "supcon", "pgd_at", "trades", "afa", "joint_afa_trades",
              "ablation_joint_eq8", "ablation_naive_eq9")

# strategy -> (trained groups, needs multiview, default view set)
_LAYOUT = {
    "natural": (("g", "h"), False, None),
    "pgd_at": (("g", "h"), False, None),
    "trades": (("g", "h"), False, None),
    "supcon": (("g", "phi"), True, ("T", "T")),
    "afa": (("g", "phi"), True, "afa"),
    "joint_afa_trades": (("g", "phi", "h"), True, "afa"),
    "ablation_joint_eq8": (("g", "phi", "h"), True, ("T", "T")),
    "ablation_naive_eq9": (("g", "phi"), True, ("T+d", "T+d")),
}


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, detail: str = "non-finite loss"):
        self.epoch, self.step = epoch, step
        super().__init__(f"epoch {epoch}, step {step}: {detail}")


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """Per-epoch learning rate: optional linear warmup, then cosine / step / constant.

    Warmup runs from ``warmup_start`` to the base rate over ``warmup_epochs``.
    Cosine anneals the remaining epochs as ``base * (1 + cos(pi * t / T)) / 2``.
    Step milestones below 1 are fractions of the total epoch count.
    """

    kind: str = "constant"
    warmup_epochs: int = 0
    warmup_start: float = 0.01
    milestones: tuple = (0.75, 0.875)
    factor: float = 0.1

    def __post_init__(self):
        if self.kind not in ("constant", "cosine", "step"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        object.__setattr__(self, "milestones", tuple(self.milestones))

    def milestone_epochs(self, epochs: int) -> list[int]:
        return [int(round(m * epochs)) if m < 1 else int(m) for m in self.milestones]

    def lr(self, base: float, epoch: int, epochs: int) -> float:
        w = self.warmup_epochs
        if epoch < w:
            return self.warmup_start + (base - self.warmup_start) * epoch / w
        if self.kind == "cosine":
            span = max(epochs - w, 1)
            return base * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / span))
        if self.kind == "step":
            passed = sum(epoch >= m for m in self.milestone_epochs(epochs))
            return base * self.factor ** passed
        return base


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, model: Model, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        params = self.model.params
        for name, p in list(params.items()):
            if not p.requires_grad or p.grad is None:
                continue
            d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            buf = self.buffers.get(name)
            buf = d if buf is None or not self.momentum else self.momentum * buf + d
            self.buffers[name] = buf
            params[name] = Tensor((p.data - lr * buf).astype(p.data.dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneMode:
    kind: str = "ALF"

    def __post_init__(self):
        if self.kind not in ("SLF", "ALF", "SFF", "AFF"):
            raise ValueError(f"unknown fine-tuning mode {self.kind!r}")

    @property
    def linear(self) -> bool:
        return self.kind in ("SLF", "ALF")

    @property
    def adversarial(self) -> bool:
        return self.kind in ("ALF", "AFF")


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "natural"
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: Schedule = Schedule()
    attack: AttackConfig = AttackConfig(epsilon=0.1, step_size=0.025, iterations=10)
    loss: LossConfig = LossConfig()
    views: tuple | str | None = None
    augment: AugmentPipeline | VectorJitter | None = None
    augment_supervised: bool = False
    balanced: bool | None = None  # default: on for contrastive strategies
    normalize_anchors: bool = True
    afa_clean_anchors: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if int(self.epochs) < 1:
            raise ValueError("epochs must be at least 1")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.views is not None:
            object.__setattr__(self, "views", parse_views(self.views))

    @property
    def groups(self) -> tuple[str, ...]:
        return _LAYOUT[self.strategy][0]

    @property
    def contrastive(self) -> bool:
        return _LAYOUT[self.strategy][1]

    @property
    def view_set(self) -> tuple[str, ...] | None:
        if self.views is not None:
            return self.views
        default = _LAYOUT[self.strategy][2]
        return None if default is None else parse_views(default)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = None if self.augment is None else {"type": type(self.augment).__name__,
                                                          **asdict(self.augment)}
        return d


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    components: dict
    maximized: str
    clean_accuracy: float
    robust_accuracy: float
    max_perturbation: float
    wall_time: float


@dataclass
class TrainHistory:
    strategy: str
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) if hasattr(r, name) else r.components.get(name) for r in self.records]

    def to_csv(self, path=None) -> str:
        keys = sorted({k for r in self.records for k in r.components})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss", *keys, "maximized", "clean_accuracy",
                    "robust_accuracy", "max_perturbation", "wall_time"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.lr), repr(r.loss), *(repr(r.components.get(k, "")) for k in keys),
                        r.maximized, repr(r.clean_accuracy), repr(r.robust_accuracy),
                        repr(r.max_perturbation), f"{r.wall_time:.3f}"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def class_balanced_batches(labels, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Split an epoch into batches holding near-equal shares of every class.

    Each class is shuffled and dealt into the same number of chunks, so a class
    with at least ``2 * num_batches`` samples has two or more in every batch.
    """
    labels = np.asarray(labels)
    n_batches = max(1, int(math.ceil(len(labels) / batch_size)))
    chunks = [[] for _ in range(n_batches)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        for b, part in enumerate(np.array_split(idx, n_batches)):
            chunks[b].append(part)
    return [rng.permutation(np.concatenate(parts)) for parts in chunks]


def _shuffled_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("shuffle", "augment", "attack")
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {k: np.random.default_rng(s) for k, s in zip(names, children)}


# ---------------------------------------------------------------------------
# strategy steps
# ---------------------------------------------------------------------------

@dataclass
class _Ctx:
    model: Model
    cfg: TrainConfig
    attack: AttackConfig
    attack_rng: np.random.Generator
    max_delta: float = 0.0

    def perturb(self, loss_fn, x) -> np.ndarray:
        """Inner maximisation; the result is a constant for the outer step."""
        atk = self.attack
        if atk.epsilon == 0:
            return x
        res = pgd(loss_fn, x, atk, self.attack_rng, record_final=False)
        self.max_delta = max(self.max_delta, float(np.abs(res.x_adv - x).max(initial=0.0)))
        return res.x_adv


def _norm(loss: Tensor, count: int, cfg: TrainConfig) -> Tensor:
    return loss * (1.0 / count) if cfg.normalize_anchors else loss


def _sup_term(ctx: _Ctx, z: Tensor, batch: ContrastiveBatch) -> Tensor:
    return _norm(contrastive_sup(z, batch, ctx.cfg.loss.tau), len(batch), ctx.cfg)


def _afa_terms(ctx: _Ctx, mv: MultiviewBatch):
    """lambda1 * L_sup(clean views) + lambda2 * L_AFA(perturbed views vs clean bank)."""
    model, lc = ctx.model, ctx.cfg.loss
    batch = mv.contrastive()
    z_clean = model.embed(mv.views)
    comps, total = {}, None
    if lc.lambda1:
        sup = _sup_term(ctx, z_clean, batch)
        comps["sup"] = sup.item()
        total = lc.lambda1 * sup
    if lc.lambda2:
        adv_rows = mv.adv_rows
        bank = Tensor(z_clean.data)

        def inner(xt):
            return afa_loss(model.embed(xt, detach=True), bank, batch, adv_rows, lc.tau,
                            lc.afa_exclude_self)

        x_adv = ctx.perturb(inner, mv.views[adv_rows]) if len(adv_rows) else mv.views[adv_rows]
        z_anchor = model.embed(x_adv)
        counterpart = adv_rows
        if ctx.cfg.afa_clean_anchors and len(mv.clean_rows):
            # unperturbed slots are anchors too, with delta = 0
            z_anchor = concat([z_anchor, take(z_clean, mv.clean_rows)])
            counterpart = np.concatenate([adv_rows, mv.clean_rows])
        afa = _norm(afa_loss(z_anchor, z_clean, batch, counterpart, lc.tau, lc.afa_exclude_self),
                    len(counterpart), ctx.cfg)
        comps["afa"] = afa.item()
        total = lc.lambda2 * afa if total is None else total + lc.lambda2 * afa
    return total, comps


def _step_natural(ctx, x, y, mv):
    logits = ctx.model.logits(x)
    loss = cross_entropy(logits, y)
    return loss, {"ce": loss.item()}, "none", logits.data


def _step_pgd_at(ctx, x, y, mv):
    x_adv = ctx.perturb(ce_loss_fn(ctx.model, y), x)
    logits = ctx.model.logits(x_adv)
    loss = cross_entropy(logits, y)
    return loss, {"ce_adv": loss.item()}, "ce", None


def _trades_terms(ctx, x, y):
    model = ctx.model
    x_adv = ctx.perturb(kl_loss_fn(model, x), x)
    nat = model.logits(x)
    ce = cross_entropy(nat, y)
    beta = ctx.cfg.loss.beta
    if beta == 0:
        return ce, {"ce": ce.item()}, nat.data
    kl = kl_divergence(nat, model.logits(x_adv))
    return ce + beta * kl, {"ce": ce.item(), "kl": kl.item()}, nat.data


def _step_trades(ctx, x, y, mv):
    loss, comps, logits = _trades_terms(ctx, x, y)
    return loss, comps, "kl", logits


def _step_supcon(ctx, x, y, mv):
    loss = _sup_term(ctx, ctx.model.embed(mv.views), mv.contrastive())
    return loss, {"sup": loss.item()}, "none", None


def _step_afa(ctx, x, y, mv):
    loss, comps = _afa_terms(ctx, mv)
    return loss, comps, "afa" if ctx.cfg.loss.lambda2 else "none", None


def _step_joint(ctx, x, y, mv):
    # originals feed TRADES, augmented views feed AFA; the two attacks are independent
    trades, comps, logits = _trades_terms(ctx, x, y)
    w = ctx.cfg.loss.joint_afa_weight
    if w == 0:
        return trades, comps, "kl", logits
    afa, afa_comps = _afa_terms(ctx, mv)
    comps.update(afa_comps)
    return trades + w * afa, comps, "kl+afa", logits


def _step_eq8(ctx, x, y, mv):
    model = ctx.model
    x_adv = ctx.perturb(ce_loss_fn(model, y), x)
    sup = _sup_term(ctx, model.embed(mv.views), mv.contrastive())
    ce = cross_entropy(model.logits(x_adv), y)
    return sup + ce, {"sup": sup.item(), "ce_adv": ce.item()}, "ce", None


def _step_eq9(ctx, x, y, mv):
    model = ctx.model
    batch = mv.contrastive()
    tau = ctx.cfg.loss.tau
    adv_rows = mv.adv_rows
    views = mv.views.copy()
    if len(adv_rows):
        clean_rows = mv.clean_rows
        z_fixed = model.embed(views[clean_rows], detach=True).data if len(clean_rows) else None

        def inner(xt):
            z = model.embed(xt, detach=True)
            if z_fixed is not None:
                z = concat([z, Tensor(z_fixed)])
                order = np.argsort(np.concatenate([adv_rows, clean_rows]), kind="stable")
                z = take(z, order)
            return contrastive_sup(z, batch, tau)

        views[adv_rows] = ctx.perturb(inner, views[adv_rows])
    loss = _sup_term(ctx, model.embed(views), batch)
    return loss, {"sup_adv": loss.item()}, "sup", None


_STEPS = {
    "natural": _step_natural,
    "pgd_at": _step_pgd_at,
    "trades": _step_trades,
    "supcon": _step_supcon,
    "afa": _step_afa,
    "joint_afa_trades": _step_joint,
    "ablation_joint_eq8": _step_eq8,
    "ablation_naive_eq9": _step_eq9,
}


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _augmenter(cfg: TrainConfig, x: np.ndarray):
    if cfg.augment is not None:
        return cfg.augment
    return AugmentPipeline() if x.ndim == 4 else VectorJitter()


def _epoch_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def train(model: Model, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None,
          eval_attack: AttackConfig | None = None, eval_every: int = 0,
          groups: tuple[str, ...] | None = None, log=None) -> tuple[Model, TrainHistory]:
    """Run ``cfg.strategy`` on ``data`` and return the (same, updated) model and its history.

    ``groups`` overrides the strategy's trained parameter groups (fine-tuning
    uses this).  With ``eval_every > 0`` clean and, if ``eval_attack`` is set,
    robust accuracy on ``eval_data`` are recorded every ``eval_every`` epochs.
    """
    groups = cfg.groups if groups is None else tuple(groups)
    model.set_trainable(groups)
    model.zero_grad()
    streams = _streams(cfg.seed)
    # non-image data has no pixel range to clamp to
    attack = cfg.attack if data.image else replace(cfg.attack, clamp=None)
    ctx = _Ctx(model, cfg, attack, streams["attack"])
    opt = SGD(model, cfg.momentum, cfg.weight_decay)
    step_fn = _STEPS[cfg.strategy]
    views = cfg.view_set
    transform = _augmenter(cfg, data.x) if (views is not None or cfg.augment_supervised) else None
    balanced = cfg.contrastive if cfg.balanced is None else cfg.balanced
    history = TrainHistory(cfg.strategy)
    x_all, y_all = data.x, data.y

    for epoch in range(int(cfg.epochs)):
        t0 = time.perf_counter()
        lr = cfg.schedule.lr(cfg.lr, epoch, cfg.epochs)
        aug_seed = _epoch_seed(streams["augment"])
        if balanced:
            batches = class_balanced_batches(y_all, cfg.batch_size, streams["shuffle"])
        else:
            batches = _shuffled_batches(len(y_all), cfg.batch_size, streams["shuffle"])
        ctx.max_delta = 0.0
        total, seen, correct, labeled = 0.0, 0, 0, 0
        comp_sums: dict[str, float] = {}
        maximized = "none"
        for step, idx in enumerate(batches):
            x, y = x_all[idx], y_all[idx]
            mv = None
            if views is not None:
                mv = build_multiview(x, y, mode="afa", views=views, transform=transform,
                                     seed=aug_seed, source_ids=idx)
            elif cfg.augment_supervised:
                x = build_multiview(x, y, mode="afa", views=("T", "x"), transform=transform,
                                    seed=aug_seed, source_ids=idx).views[0::2]
            try:
                loss, comps, maximized, logits = step_fn(ctx, x, y, mv)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch, step)
                model.zero_grad()
                loss.backward()
            except (NonFiniteError, AttackError) as exc:
                raise TrainingDivergedError(epoch, step, str(exc)) from exc
            opt.step(lr)
            total += value * len(idx)
            seen += len(idx)
            for k, v in comps.items():
                comp_sums[k] = comp_sums.get(k, 0.0) + v * len(idx)
            if logits is not None:
                correct += int((np.argmax(logits, axis=1) == y).sum())
                labeled += len(y)
        if ctx.max_delta > cfg.attack.epsilon + 1e-6:
            raise TrainingDivergedError(epoch, len(batches) - 1, "perturbation left its epsilon ball")
        clean_acc = correct / labeled if labeled else float("nan")
        robust_acc = float("nan")
        if eval_every and eval_data is not None and ((epoch + 1) % eval_every == 0
                                                     or epoch + 1 == cfg.epochs):
            clean_acc = float(np.mean(model.predict(eval_data.x) == eval_data.y))
            if eval_attack is not None:
                rng = np.random.default_rng([cfg.seed, 7, epoch])
                robust_acc = robust_accuracy(model, eval_data.x, eval_data.y, eval_attack, rng)
        rec = EpochRecord(epoch, lr, total / max(seen, 1),
                          {k: v / max(seen, 1) for k, v in comp_sums.items()}, maximized,
                          clean_acc, robust_acc, ctx.max_delta, time.perf_counter() - t0)
        history.records.append(rec)
        if log is not None:
            log(rec)
    model.zero_grad()
    return model, history


# ---------------------------------------------------------------------------
# named entry points
# ---------------------------------------------------------------------------

def _with(cfg: TrainConfig | None, strategy: str, **defaults) -> TrainConfig:
    if cfg is None:
        return TrainConfig(strategy=strategy, **defaults)
    return replace(cfg, strategy=strategy)


def train_natural(model, data, cfg=None, **kw):
    return train(model, data, _with(cfg, "natural"), **kw)


def train_pgd_at(model, data, cfg=None, **kw):
    return train(model, data, _with(cfg, "pgd_at"), **kw)


def train_trades(model, data, cfg=None, **kw):
    return train(model, data, _with(cfg, "trades"), **kw)


def pretrain_supcon(model, data, cfg=None, **kw):
    return train(model, data, _with(cfg, "supcon"), **kw)


def pretrain_afa(model, data, cfg=None, **kw):
    return train(model, data, _with(cfg, "afa"), **kw)


def train_joint_afa_trades(model, data, cfg=None, **kw):
    return train(model, data, _with(cfg, "joint_afa_trades", loss=LossConfig(lambda1=1, lambda2=5, beta=5)),
                 **kw)


def train_ablation(model, data, cfg: TrainConfig, **kw):
    if cfg.strategy not in ("ablation_joint_eq8", "ablation_naive_eq9"):
        raise ValueError("train_ablation expects an ablation strategy")
    return train(model, data, cfg, **kw)


def finetune(model: Model, data: Dataset, mode: FinetuneMode | str = "ALF",
             cfg: TrainConfig | None = None, **kw) -> tuple[Model, TrainHistory]:
    """Fine-tune after pre-training.  Linear modes train ``h`` only; adversarial modes use PGD-AT."""
    mode = FinetuneMode(mode) if isinstance(mode, str) else mode
    strategy = "pgd_at" if mode.adversarial else "natural"
    base = cfg if cfg is not None else TrainConfig(epochs=5, lr=0.1)
    cfg = replace(base, strategy=strategy, views=None)
    groups = ("h",) if mode.linear else ("g", "h")
    return train(model, data, cfg, groups=groups, **kw)
