"""L-infinity PGD / FGSM and the adaptive AFA-loss attack.

The attack loop mirrors the usual PyTorch pattern::

    delta = uniform(-eps, eps)
    for _ in range(steps):
        loss = loss_fn(x + delta); loss.backward()
        delta = clip(delta + alpha * sign(grad), -eps, eps)
        delta = clip(x + delta, lo, hi) - x

Loss functions receive the perturbed input as a Tensor and must treat model
parameters as constants (the helpers below call the model with
``detach=True``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import ContrastiveBatch, afa_loss, cross_entropy, kl_divergence
from .tensor import Tensor, get_default_dtype, no_grad

__all__ = [
    "AttackConfig",
    "AttackResult",
    "AttackError",
    "pgd",
    "fgsm",
    "ce_loss_fn",
    "kl_loss_fn",
    "attack_model",
    "robust_accuracy",
    "adaptive_afa_attack",
]


class AttackError(RuntimeError):
    def __init__(self, iteration: int, detail: str = "non-finite gradient"):
        self.iteration = iteration
        super().__init__(f"attack iteration {iteration}: {detail}")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    step_size: float = 0.01
    iterations: int = 20
    random_start: bool = True
    clamp: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        # epsilon = 0 is allowed as the degenerate "no attack" budget
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if int(self.iterations) < 1:
            raise ValueError("iterations must be at least 1")
        if self.clamp is not None:
            lo, hi = self.clamp
            if not lo < hi:
                raise ValueError("clamp range must be nonempty")
            object.__setattr__(self, "clamp", (float(lo), float(hi)))

    @classmethod
    def fgsm(cls, epsilon: float, clamp=(0.0, 1.0)) -> "AttackConfig":
        return cls(epsilon=epsilon, step_size=epsilon if epsilon > 0 else 1.0, iterations=1,
                   random_start=False, clamp=clamp)


@dataclass
class AttackResult:
    delta: np.ndarray
    x_adv: np.ndarray
    loss_trace: list[float] = field(default_factory=list)
    prediction: np.ndarray | None = None


def _project(x, delta, cfg: AttackConfig):
    delta = np.clip(delta, -cfg.epsilon, cfg.epsilon)
    x_adv = x + delta
    if cfg.clamp is not None:
        x_adv = np.clip(x_adv, *cfg.clamp)
    return x_adv - x, x_adv


def pgd(loss_fn, x, cfg: AttackConfig, rng: np.random.Generator | None = None,
        record_final: bool = True) -> AttackResult:
    """Maximise ``loss_fn`` over the L-inf ball of radius ``cfg.epsilon`` around ``x``.

    ``loss_trace[t]`` is the loss at the t-th iterate; with ``record_final``
    one extra forward pass appends the loss at the returned point.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=get_default_dtype())
    if cfg.clamp is not None and (x.min(initial=cfg.clamp[0]) < cfg.clamp[0]
                                  or x.max(initial=cfg.clamp[1]) > cfg.clamp[1]):
        raise ValueError("attack input lies outside the clamp range")
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start needs a seeded generator")
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype)
    else:
        delta = np.zeros_like(x)
    delta, x_adv = _project(x, delta, cfg)
    trace: list[float] = []
    for it in range(int(cfg.iterations)):
        xt = Tensor(x_adv, requires_grad=True)
        loss = loss_fn(xt)
        loss.backward()
        grad = xt.grad
        if grad is None:
            grad = np.zeros_like(x)
        if not np.isfinite(grad).all():
            raise AttackError(it)
        trace.append(loss.item())
        delta = delta + cfg.step_size * np.sign(grad).astype(x.dtype)
        delta, x_adv = _project(x, delta, cfg)
    if record_final:
        with no_grad():
            trace.append(loss_fn(Tensor(x_adv)).item())
    return AttackResult(delta=delta, x_adv=x_adv, loss_trace=trace)


def fgsm(loss_fn, x, epsilon: float, clamp=(0.0, 1.0)) -> AttackResult:
    return pgd(loss_fn, x, AttackConfig.fgsm(epsilon, clamp))


# ---------------------------------------------------------------------------
# model-facing helpers
# ---------------------------------------------------------------------------

def ce_loss_fn(model, y):
    return lambda xt: cross_entropy(model.logits(xt, detach=True), y)


def kl_loss_fn(model, x_clean):
    """KL(f(x) || f(x')) with the clean distribution held constant."""
    with no_grad():
        p = model.logits(x_clean, detach=True)
    return lambda xt: kl_divergence(p, model.logits(xt, detach=True))


def attack_model(model, x, y, cfg: AttackConfig, rng=None, loss: str = "ce") -> AttackResult:
    if loss == "ce":
        fn = ce_loss_fn(model, y)
    elif loss == "kl":
        fn = kl_loss_fn(model, x)
    else:
        raise ValueError(f"unknown attack loss {loss!r}")
    res = pgd(fn, x, cfg, rng)
    res.prediction = model.predict(res.x_adv)
    return res


def robust_accuracy(model, x, y, cfg: AttackConfig, rng, batch_size: int = 250) -> float:
    """Accuracy on CE-PGD examples, attacking ``batch_size`` samples at a time."""
    y = np.asarray(y)
    correct = 0
    for s in range(0, len(x), batch_size):
        xb, yb = x[s:s + batch_size], y[s:s + batch_size]
        res = pgd(ce_loss_fn(model, yb), xb, cfg, rng, record_final=False)
        correct += int((model.predict(res.x_adv) == yb).sum())
    return correct / max(len(x), 1)


def adaptive_afa_attack(model, x, y, cfg: AttackConfig, rng=None, tau: float = 0.5,
                        exclude_self: bool = False, batch_size: int = 250):
    """PGD on the AFA loss (perturbed anchors vs the clean batch as bank).

    Returns ``(success_rate, x_adv)`` where success means the classifier's
    prediction on the perturbed input differs from the label.
    """
    y = np.asarray(y)
    advs = []
    for s in range(0, len(x), batch_size):
        xb, yb = x[s:s + batch_size], y[s:s + batch_size]
        with no_grad():
            bank = model.embed(xb, detach=True)
        batch = ContrastiveBatch(yb, np.arange(len(yb)))

        def loss_fn(xt, bank=bank, batch=batch):
            return afa_loss(model.embed(xt, detach=True), bank, batch, tau=tau,
                            exclude_self=exclude_self)

        advs.append(pgd(loss_fn, xb, cfg, rng, record_final=False).x_adv)
    x_adv = np.concatenate(advs) if advs else np.zeros_like(x)
    success = float(np.mean(model.predict(x_adv) != y)) if len(y) else 0.0
    return success, x_adv
