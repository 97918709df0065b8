"""Full-batch training, evaluation, cross-validation, stability collection.

Collapse reporting convention: a run is *collapsed* when its evaluation head
is non-finite at the final epoch (for late fusion: when both branch heads
are).  A collapsed run reports the majority-class baseline as its accuracy,
so degenerate runs land at the chance floor instead of NaN.

Adam skips any parameter whose gradient contains a non-finite value for that
step, recording a stability event; gradients are never silently zeroed.
Parameters that the loss did not reach at all (a guard-excluded branch) are
left untouched for that step, including weight decay: exclusion from the
loss means exclusion from the update.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .autodiff import Param, Tape, backward
from .graphs import Graph, make_folds
from .models import HET, STAB, ModelConfig, ModelParams, build_forward, init_params, operator_pair

__all__ = [
    "CvResult",
    "RunResult",
    "StabilityEvent",
    "TrainConfig",
    "adam_step",
    "accuracy",
    "cross_validate",
    "format_mean_std",
    "majority_baseline",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    selection: str = "best_val"  # or "final"
    track_grad_norms: tuple[str, ...] = ()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.selection not in ("best_val", "final"):
            raise ValueError(f"unknown selection rule {self.selection!r}")


@dataclass(frozen=True)
class StabilityEvent:
    """First non-finite occurrence at one site of one run."""

    epoch: int
    branch: str  # het | stab | fused
    site: str  # basis | head | grad
    layer: int | None = None
    order: int | None = None
    max_abs_before: float = 0.0
    param: str | None = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "branch": self.branch,
            "site": self.site,
            "layer": self.layer,
            "order": self.order,
            "max_abs_before": self.max_abs_before,
            "param": self.param,
        }


@dataclass
class RunResult:
    train_loss: list[float]
    val_acc: list[float]
    test_acc: list[float]
    best_val_epoch: int
    test_acc_at_best_val: float
    test_acc_final_epoch: float
    reported_acc: float
    collapsed: bool
    majority_acc: float
    stability_events: list[StabilityEvent]
    excluded_epochs: dict[str, int]
    grad_norms: dict[str, list[float]] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        """JSON-ready view.  Timing is intentionally left out so identical
        (config, seed) runs serialize to identical bytes."""
        return {
            "train_loss": self.train_loss,
            "val_acc": self.val_acc,
            "test_acc": self.test_acc,
            "best_val_epoch": self.best_val_epoch,
            "test_acc_at_best_val": self.test_acc_at_best_val,
            "test_acc_final_epoch": self.test_acc_final_epoch,
            "reported_acc": self.reported_acc,
            "collapsed": self.collapsed,
            "majority_acc": self.majority_acc,
            "stability_events": [e.to_dict() for e in self.stability_events],
            "excluded_epochs": self.excluded_epochs,
            "grad_norms": self.grad_norms,
        }


def accuracy(logp: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    idx = np.flatnonzero(mask)
    preds = np.argmax(logp[idx], axis=1)
    return float(np.mean(preds == labels[idx]))


def majority_baseline(g: Graph, mask: np.ndarray, train_mask: np.ndarray | None = None) -> float:
    """Accuracy of always predicting the most frequent training-mask class."""
    source = g.masks["train"] if train_mask is None else train_mask
    counts = np.bincount(g.labels[source], minlength=g.num_classes)
    cls = int(np.argmax(counts))  # ties resolve to the smallest class id
    idx = np.flatnonzero(mask)
    return float(np.mean(g.labels[idx] == cls))


def adam_step(
    params: list[Param],
    cfg: TrainConfig,
    epoch: int,
    events: "_EventLog",
) -> None:
    """One Adam update with classic L2 weight decay added to the gradient.

    Parameters with ``grad is None`` were not reached by the loss and stay
    frozen.  A non-finite gradient freezes that parameter for the step and
    records a stability event.
    """
    for p in params:
        if p.grad is None:
            continue
        if not np.isfinite(p.grad).all():
            events.note_grad(epoch, p.name)
            continue
        g = p.grad + cfg.weight_decay * p.value
        p.step += 1
        p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * g
        p.v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * (g * g)
        m_hat = p.m / (1.0 - cfg.beta1**p.step)
        v_hat = p.v / (1.0 - cfg.beta2**p.step)
        p.value -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


class _EventLog:
    """Deduplicating event collector: first occurrence per site per run."""

    def __init__(self):
        self.events: list[StabilityEvent] = []
        self._seen: set[tuple] = set()

    def note_forward(self, epoch: int, fw_events) -> None:
        for ev in fw_events:
            key = (ev.branch, ev.site, ev.layer)
            if key in self._seen:
                continue
            self._seen.add(key)
            self.events.append(
                StabilityEvent(
                    epoch=epoch,
                    branch=ev.branch,
                    site=ev.site,
                    layer=ev.layer,
                    order=ev.order,
                    max_abs_before=ev.max_abs_before,
                )
            )

    def note_grad(self, epoch: int, param_name: str) -> None:
        key = ("grad", param_name)
        if key in self._seen:
            return
        self._seen.add(key)
        branch = param_name.split(".", 1)[0]
        self.events.append(
            StabilityEvent(epoch=epoch, branch=branch, site="grad", param=param_name)
        )


def _branch_grad_norm(params: ModelParams, prefix: str) -> float:
    total = 0.0
    for p in params.branch(prefix):
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    g: Graph,
    masks: dict[str, np.ndarray] | None = None,
    params: ModelParams | None = None,
) -> RunResult:
    """Full-batch training run, deterministic given (configs, graph, seed)."""
    masks = masks if masks is not None else g.masks
    for name in ("train", "val", "test"):
        if name not in masks or not np.any(masks[name]):
            raise ValueError(f"training requires a nonempty {name!r} mask")
    t0 = time.perf_counter()
    ops = operator_pair(g)
    if params is None:
        params = init_params(model_cfg, g.num_features, g.num_classes, train_cfg.seed)
    all_params = params.all()
    rngs = {
        HET: seeding.substream(train_cfg.seed, seeding.DROPOUT, seeding.HET),
        STAB: seeding.substream(train_cfg.seed, seeding.DROPOUT, seeding.STAB),
        "fused": seeding.substream(train_cfg.seed, seeding.DROPOUT, seeding.FUSED),
    }

    events = _EventLog()
    losses: list[float] = []
    val_curve: list[float] = []
    test_curve: list[float] = []
    excluded_epochs: dict[str, int] = {}
    grad_norms: dict[str, list[float]] = {b: [] for b in train_cfg.track_grad_norms}
    final_eval_dead = False

    for epoch in range(1, train_cfg.epochs + 1):
        tape = Tape()
        out = build_forward(tape, model_cfg, params, g, ops, rngs=rngs, train=True)
        loss = tape.nll_loss(out.out_final, g.labels, masks["train"])
        losses.append(float(loss.value[0, 0]))
        events.note_forward(epoch, out.events)
        for b in out.excluded:
            excluded_epochs[b] = excluded_epochs.get(b, 0) + 1
        backward(loss, tape)
        for b in train_cfg.track_grad_norms:
            grad_norms[b].append(_branch_grad_norm(params, b))
        adam_step(all_params, train_cfg, epoch, events)

        eval_tape = Tape()
        eval_out = build_forward(eval_tape, model_cfg, params, g, ops, train=False)
        events.note_forward(epoch, eval_out.events)
        head = eval_out.out_final.value
        val_curve.append(accuracy(head, g.labels, masks["val"]))
        test_curve.append(accuracy(head, g.labels, masks["test"]))
        if epoch == train_cfg.epochs:
            final_eval_dead = eval_out.all_heads_nonfinite

    best_val_epoch = int(np.argmax(val_curve))  # first maximum
    test_at_best = test_curve[best_val_epoch]
    test_final = test_curve[-1]
    majority = majority_baseline(g, masks["test"], masks["train"])
    collapsed = bool(final_eval_dead)
    if collapsed:
        reported = majority
    elif train_cfg.selection == "best_val":
        reported = test_at_best
    else:
        reported = test_final
    events.events.sort(key=lambda e: (e.epoch, e.branch, e.site, str(e.param)))
    return RunResult(
        train_loss=losses,
        val_acc=val_curve,
        test_acc=test_curve,
        best_val_epoch=best_val_epoch + 1,
        test_acc_at_best_val=test_at_best,
        test_acc_final_epoch=test_final,
        reported_acc=reported,
        collapsed=collapsed,
        majority_acc=majority,
        stability_events=events.events,
        excluded_epochs=excluded_epochs,
        grad_norms=grad_norms,
        wall_time=time.perf_counter() - t0,
    )


@dataclass
class CvResult:
    fold_results: list[RunResult]
    mean: float
    std: float
    any_collapsed: bool

    def render(self) -> str:
        """Table-style cell text, accuracies in percent."""
        cell = f"{100.0 * self.mean:.2f} ± {100.0 * self.std:.2f}"
        if self.any_collapsed:
            cell += " (COLLAPSED)"
        return cell

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "any_collapsed": self.any_collapsed,
            "folds": [r.to_dict() for r in self.fold_results],
        }


def format_mean_std(mean: float, std: float) -> str:
    return f"{100.0 * mean:.2f} ± {100.0 * std:.2f}"


def fold_seed(seed: int, fold: int) -> int:
    """Well-mixed per-fold run seed derived from the root seed."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(seeding.FOLDS, fold))
    return int(ss.generate_state(1, np.uint64)[0])


def cross_validate(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    g: Graph,
    k: int = 10,
    folds: list[dict[str, np.ndarray]] | None = None,
) -> CvResult:
    """k repeated stratified splits; population mean/std of reported accuracy."""
    if folds is None:
        folds = make_folds(g, k, seed=train_cfg.seed)
    results = []
    for i, masks in enumerate(folds):
        cfg_i = TrainConfig(
            lr=train_cfg.lr,
            weight_decay=train_cfg.weight_decay,
            epochs=train_cfg.epochs,
            seed=fold_seed(train_cfg.seed, i),
            beta1=train_cfg.beta1,
            beta2=train_cfg.beta2,
            eps=train_cfg.eps,
            selection=train_cfg.selection,
            track_grad_norms=train_cfg.track_grad_norms,
        )
        results.append(train(model_cfg, cfg_i, g, masks=masks))
    accs = np.array([r.reported_acc for r in results])
    return CvResult(
        fold_results=results,
        mean=float(np.mean(accs)),
        std=float(np.std(accs)),
        any_collapsed=any(r.collapsed for r in results),
    )
