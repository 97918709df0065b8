"""The four node-classification architectures as tape-building forwards.

Variants:
  * ``cheby``       2-layer Chebyshev net on the shifted Laplacian;
  * ``krawtchouk``  2-layer Krawtchouk net on the scaled Laplacian with a
                    learnable shape parameter p = sigmoid(raw_p) per layer;
  * ``hyb_v3``      early fusion: both convs at every layer, concatenated
                    into one shared representation and one gradient path;
  * ``hyb_v4``      late fusion: two full parallel nets whose log-prob heads
                    are averaged, with zero shared parameters.

The Krawtchouk basis is rebuilt inside the tape on every forward so the
gradient of the loss reaches raw_p through the recurrence coefficients.

The v4 fusion guard (``mask_nonfinite``) drops a branch whose head contains
any non-finite entry from the fused output and the loss for that step and
records a stability event.  Without the guard a single poisoned branch makes
the fused head non-finite; the guard is switchable off to demonstrate that.
v3 structurally cannot be guarded: the branches share one representation, so
the guard setting is ignored there.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import seeding
from .autodiff import Node, Param, Tape
from .filters import krawtchouk_recurrence_terms
from .graphs import Graph, l_hat, l_scaled, sym_laplacian
from .linalg import finite_probe

__all__ = [
    "BranchOutputs",
    "ForwardEvent",
    "ModelConfig",
    "ModelParams",
    "NanInjection",
    "VARIANTS",
    "build_forward",
    "init_params",
    "load_checkpoint",
    "operator_pair",
    "parameter_count",
    "response_weights",
    "save_checkpoint",
]

VARIANTS = ("cheby", "krawtchouk", "hyb_v3", "hyb_v4")
RELU_DROPOUT_ORDERS = ("relu_after_dropout", "dropout_after_relu")
FUSION_GUARDS = ("mask_nonfinite", "off")

HET = "het"
STAB = "stab"
FUSED = "fused"

CHECKPOINT_FORMAT = "specfuse-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    k: int = 3
    hidden: int = 16
    dropout: float = 0.5
    relu_dropout_order: str = "relu_after_dropout"
    fusion_guard: str = "mask_nonfinite"
    raw_p_init: float = 0.0
    lattice: int | None = None  # Krawtchouk lattice size N; defaults to k

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.k < 1 or self.hidden < 1:
            raise ValueError("k and hidden width must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")
        if self.relu_dropout_order not in RELU_DROPOUT_ORDERS:
            raise ValueError(f"unknown relu/dropout order {self.relu_dropout_order!r}")
        if self.fusion_guard not in FUSION_GUARDS:
            raise ValueError(f"unknown fusion guard {self.fusion_guard!r}")
        if self.lattice is not None and self.lattice < self.k:
            raise ValueError("lattice size must be >= k")

    @property
    def lattice_size(self) -> int:
        return self.k if self.lattice is None else self.lattice


@dataclass(frozen=True)
class NanInjection:
    """Test instrument: poison one basis order with a single NaN entry.

    Applied to the freshly propagated order, so ``order`` must be >= 1.
    """

    branch: str
    layer: int
    order: int
    row: int = 0
    col: int = 0

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("injection order must be >= 1")


@dataclass(frozen=True)
class ForwardEvent:
    """A non-finite occurrence observed while building one forward pass."""

    branch: str  # het | stab | fused
    site: str  # basis | head
    layer: int | None
    order: int | None
    max_abs_before: float


@dataclass
class BranchOutputs:
    """Heads of one forward pass plus stability bookkeeping.

    ``out_final`` is the node the loss should be taken on.  For thefused and
    single-branch variants ``out_het``/``out_stab`` may be None.
    """

    out_final: Node
    out_het: Node | None
    out_stab: Node | None
    events: list[ForwardEvent]
    excluded: frozenset[str]
    all_heads_nonfinite: bool


class ModelParams:
    """Named parameter bundle for one model instance."""

    def __init__(self, cfg: ModelConfig, in_dim: int, out_dim: int, params: dict[str, Param]):
        self.cfg = cfg
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.params = params

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def all(self) -> list[Param]:
        return list(self.params.values())

    def branch(self, prefix: str) -> list[Param]:
        return [p for name, p in self.params.items() if name.startswith(prefix + ".")]

    def total_entries(self) -> int:
        return sum(p.value.size for p in self.params.values())


def _uniform(rng: np.random.Generator, fan_in: int, orders: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in * orders)
    return rng.uniform(-bound, bound, size=shape)


def _conv_params(
    params: dict[str, Param],
    rng: np.random.Generator,
    branch: str,
    layer: int,
    kind: str,
    k: int,
    f_in: int,
    f_out: int,
    raw_p_init: float,
) -> None:
    for order in range(k + 1):
        name = f"{branch}.layer{layer}.w{order}"
        params[name] = Param(name, _uniform(rng, f_in, k + 1, (f_in, f_out)))
    if kind == "krawtchouk":
        name = f"{branch}.layer{layer}.raw_p"
        params[name] = Param(name, np.array([[raw_p_init]]))


def init_params(cfg: ModelConfig, in_dim: int, out_dim: int, seed: int) -> ModelParams:
    """Centered-uniform init with fan-in scaling; raw_p starts at cfg.raw_p_init.

    Each branch draws from its own substream, so the stable branch of a
    late-fusion model is initialized identically to a standalone stable model
    under the same seed.
    """
    k, h = cfg.k, cfg.hidden
    rng_het = seeding.substream(seed, seeding.INIT, seeding.HET)
    rng_stab = seeding.substream(seed, seeding.INIT, seeding.STAB)
    rng_fused = seeding.substream(seed, seeding.INIT, seeding.FUSED)
    params: dict[str, Param] = {}
    if cfg.variant == "cheby":
        _conv_params(params, rng_stab, STAB, 1, "cheb", k, in_dim, h, 0.0)
        _conv_params(params, rng_stab, STAB, 2, "cheb", k, h, out_dim, 0.0)
    elif cfg.variant == "krawtchouk":
        _conv_params(params, rng_het, HET, 1, "krawtchouk", k, in_dim, h, cfg.raw_p_init)
        _conv_params(params, rng_het, HET, 2, "krawtchouk", k, h, out_dim, cfg.raw_p_init)
    elif cfg.variant == "hyb_v3":
        _conv_params(params, rng_het, HET, 1, "krawtchouk", k, in_dim, h, cfg.raw_p_init)
        _conv_params(params, rng_stab, STAB, 1, "cheb", k, in_dim, h, 0.0)
        _conv_params(params, rng_het, HET, 2, "krawtchouk", k, 2 * h, out_dim, cfg.raw_p_init)
        _conv_params(params, rng_stab, STAB, 2, "cheb", k, 2 * h, out_dim, 0.0)
        params["fused.proj"] = Param(
            "fused.proj", _uniform(rng_fused, 2 * out_dim, 1, (2 * out_dim, out_dim))
        )
    else:  # hyb_v4
        _conv_params(params, rng_het, HET, 1, "krawtchouk", k, in_dim, h, cfg.raw_p_init)
        _conv_params(params, rng_het, HET, 2, "krawtchouk", k, h, out_dim, cfg.raw_p_init)
        _conv_params(params, rng_stab, STAB, 1, "cheb", k, in_dim, h, 0.0)
        _conv_params(params, rng_stab, STAB, 2, "cheb", k, h, out_dim, 0.0)
    return ModelParams(cfg, in_dim, out_dim, params)


def parameter_count(variant: str, k: int, hidden: int, in_dim: int, out_dim: int) -> int:
    """Closed-form parameter totals (weights plus raw_p scalars)."""
    kk = k + 1
    f, h, c = in_dim, hidden, out_dim
    if variant == "cheby":
        return kk * (f * h + h * c)
    if variant == "krawtchouk":
        return kk * (f * h + h * c) + 2
    if variant == "hyb_v3":
        return kk * (2 * f * h + 2 * (2 * h) * c) + 2 * c * c + 2
    if variant == "hyb_v4":
        return kk * (2 * f * h + 2 * h * c) + 2
    raise ValueError(f"unknown variant {variant!r}")


def operator_pair(g: Graph):
    """(shifted, scaled) Laplacian operators for a graph."""
    lap = sym_laplacian(g.adjacency)
    return l_hat(lap), l_scaled(lap)


class _Instrument:
    """Collects non-finite observations during one forward build."""

    def __init__(self):
        self.events: list[ForwardEvent] = []

    def watch_stack(self, branch: str, layer: int, nodes: list[Node]) -> None:
        prev_max = 0.0
        for order, node in enumerate(nodes):
            probe = finite_probe(node.value)
            if not probe.is_finite:
                self.events.append(
                    ForwardEvent(branch, "basis", layer, order, prev_max)
                )
                return
            prev_max = probe.max_abs

    def watch_head(self, branch: str, head: Node, logits: Node) -> bool:
        probe = finite_probe(head.value)
        if not probe.is_finite:
            self.events.append(
                ForwardEvent(branch, "head", None, None, finite_probe(logits.value).max_abs)
            )
        return probe.is_finite


def _cheb_stack(tape: Tape, op, x: Node, k: int, inject, branch, layer) -> list[Node]:
    nodes = [x, tape.spmm(op, x)]
    _maybe_inject(tape, nodes, inject, branch, layer)
    for order in range(2, k + 1):
        nxt = tape.add(tape.scale(tape.spmm(op, nodes[-1]), 2.0), tape.scale(nodes[-2], -1.0))
        nodes.append(nxt)
        _maybe_inject(tape, nodes, inject, branch, layer)
    return nodes


def _kraw_stack(
    tape: Tape, op, x: Node, k: int, lattice: int, p: Node, inject, branch, layer
) -> list[Node]:
    nodes = [x]
    for order in range(k):
        (aa, ab), (ba, bb), (da, db) = krawtchouk_recurrence_terms(order, lattice)
        a_k = tape.affine(p, aa, ab)
        d_inv = tape.reciprocal(tape.affine(p, da, db))
        acc = tape.add(
            tape.scale_by(nodes[order], a_k),
            tape.scale(tape.spmm(op, nodes[order]), -float(lattice)),
        )
        if order > 0:
            neg_b = tape.affine(p, -ba, -bb)
            acc = tape.add(acc, tape.scale_by(nodes[order - 1], neg_b))
        nodes.append(tape.scale_by(acc, d_inv))
        _maybe_inject(tape, nodes, inject, branch, layer)
    return nodes


def _maybe_inject(tape: Tape, nodes: list[Node], inject, branch: str, layer: int) -> None:
    if inject is None:
        return
    if inject.branch == branch and inject.layer == layer and inject.order == len(nodes) - 1:
        # poke the freshly computed order in place; downstream ops read .value
        nodes[-1].value[inject.row, inject.col] = np.nan


def _conv_sum(tape: Tape, stack: list[Node], weights: list[Node]) -> Node:
    if len(stack) != len(weights):
        raise ValueError(f"basis has {len(stack)} orders but {len(weights)} weight matrices")
    out = tape.matmul(stack[0], weights[0])
    for s, w in zip(stack[1:], weights[1:]):
        out = tape.add(out, tape.matmul(s, w))
    return out


def _conv(
    tape: Tape,
    kind: str,
    cfg: ModelConfig,
    params: ModelParams,
    branch: str,
    layer: int,
    ops,
    x: Node,
    inject,
    instrument: _Instrument,
) -> Node:
    lhat_op, lscaled_op = ops
    k = cfg.k
    weights = [tape.param(params[f"{branch}.layer{layer}.w{o}"]) for o in range(k + 1)]
    if kind == "cheb":
        stack = _cheb_stack(tape, lhat_op, x, k, inject, branch, layer)
    else:
        p = tape.sigmoid(tape.param(params[f"{branch}.layer{layer}.raw_p"]))
        stack = _kraw_stack(
            tape, lscaled_op, x, k, cfg.lattice_size, p, inject, branch, layer
        )
    instrument.watch_stack(branch, layer, stack)
    return _conv_sum(tape, stack, weights)


def _activation(tape: Tape, cfg: ModelConfig, x: Node, rng, train: bool) -> Node:
    if cfg.relu_dropout_order == "relu_after_dropout":
        return tape.relu(tape.dropout(x, cfg.dropout, rng, train))
    return tape.dropout(tape.relu(x), cfg.dropout, rng, train)


def _branch_net(
    tape: Tape,
    kind: str,
    cfg: ModelConfig,
    params: ModelParams,
    branch: str,
    ops,
    x0: Node,
    rng,
    train: bool,
    inject,
    instrument: _Instrument,
) -> tuple[Node, Node]:
    """Full 2-layer single-basis net; returns (head, pre-softmax logits)."""
    h1 = _conv(tape, kind, cfg, params, branch, 1, ops, x0, inject, instrument)
    h1 = _activation(tape, cfg, h1, rng, train)
    logits = _conv(tape, kind, cfg, params, branch, 2, ops, h1, inject, instrument)
    return tape.log_softmax_rows(logits), logits


def build_forward(
    tape: Tape,
    cfg: ModelConfig,
    params: ModelParams,
    g: Graph,
    ops,
    rngs: dict[str, np.random.Generator] | None = None,
    train: bool = False,
    inject: NanInjection | None = None,
) -> BranchOutputs:
    """Build one forward pass on the tape and return its heads.

    ``ops`` is the (l_hat, l_scaled) pair from :func:`operator_pair`;
    ``rngs`` maps branch names to persistent dropout generators (only needed
    when ``train`` is true and dropout > 0).
    """
    rngs = rngs or {}
    instrument = _Instrument()
    x0 = tape.leaf(g.features)
    variant = cfg.variant

    if variant in ("cheby", "krawtchouk"):
        branch = STAB if variant == "cheby" else HET
        kind = "cheb" if variant == "cheby" else "krawtchouk"
        head, logits = _branch_net(
            tape, kind, cfg, params, branch, ops, x0, rngs.get(branch), train, inject, instrument
        )
        ok = instrument.watch_head(branch, head, logits)
        return BranchOutputs(
            out_final=head,
            out_het=head if branch == HET else None,
            out_stab=head if branch == STAB else None,
            events=instrument.events,
            excluded=frozenset(),
            all_heads_nonfinite=not ok,
        )

    if variant == "hyb_v3":
        # early fusion: one shared representation, one gradient path, no guard
        het1 = _conv(tape, "krawtchouk", cfg, params, HET, 1, ops, x0, inject, instrument)
        stab1 = _conv(tape, "cheb", cfg, params, STAB, 1, ops, x0, inject, instrument)
        hidden = _activation(tape, cfg, tape.concat_cols(het1, stab1), rngs.get(FUSED), train)
        het2 = _conv(tape, "krawtchouk", cfg, params, HET, 2, ops, hidden, inject, instrument)
        stab2 = _conv(tape, "cheb", cfg, params, STAB, 2, ops, hidden, inject, instrument)
        logits = tape.matmul(tape.concat_cols(het2, stab2), tape.param(params["fused.proj"]))
        head = tape.log_softmax_rows(logits)
        ok = instrument.watch_head(FUSED, head, logits)
        return BranchOutputs(
            out_final=head,
            out_het=None,
            out_stab=None,
            events=instrument.events,
            excluded=frozenset(),
            all_heads_nonfinite=not ok,
        )

    # hyb_v4: two full nets, fused only at the log-prob heads
    out_het, logits_het = _branch_net(
        tape, "krawtchouk", cfg, params, HET, ops, x0, rngs.get(HET), train, inject, instrument
    )
    out_stab, logits_stab = _branch_net(
        tape, "cheb", cfg, params, STAB, ops, x0, rngs.get(STAB), train, inject, instrument
    )
    het_ok = instrument.watch_head(HET, out_het, logits_het)
    stab_ok = instrument.watch_head(STAB, out_stab, logits_stab)

    excluded: frozenset[str] = frozenset()
    if cfg.fusion_guard == "mask_nonfinite":
        if het_ok and stab_ok:
            out_final = tape.mean_pair(out_het, out_stab)
        elif stab_ok:
            out_final = out_stab
            excluded = frozenset({HET})
        elif het_ok:
            out_final = out_het
            excluded = frozenset({STAB})
        else:
            out_final = tape.mean_pair(out_het, out_stab)
            excluded = frozenset({HET, STAB})
    else:
        out_final = tape.mean_pair(out_het, out_stab)
    return BranchOutputs(
        out_final=out_final,
        out_het=out_het,
        out_stab=out_stab,
        events=instrument.events,
        excluded=excluded,
        all_heads_nonfinite=not (het_ok or stab_ok),
    )


def response_weights(params: ModelParams, branch: str, layer: int = 1) -> np.ndarray:
    """Per-order scalar filter weights: the mean entry of each weight matrix.

    This is the response of the average input/output channel pair; it keeps
    sign information, which norm-based summaries would destroy.
    """
    k = params.cfg.k
    return np.array(
        [float(np.mean(params[f"{branch}.layer{layer}.w{o}"].value)) for o in range(k + 1)]
    )


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": asdict(params.cfg),
        "in_dim": params.in_dim,
        "out_dim": params.out_dim,
        "params": {
            name: {"shape": list(p.value.shape), "data": p.value.ravel().tolist()}
            for name, p in params.params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path: str | Path) -> ModelParams:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a model checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    cfg = ModelConfig(**payload["model"])
    params: dict[str, Param] = {}
    for name, spec in payload["params"].items():
        value = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        params[name] = Param(name, value)
    return ModelParams(cfg, payload["in_dim"], payload["out_dim"], params)
