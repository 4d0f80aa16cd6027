"""Conventional learned linear gate, with an optional Switch-style auxiliary
load-balancing loss. Used as the comparison point for the eigen router.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import Node
from .errors import ParameterError, ShapeError
from .router import RoutingDecision, decide


@dataclass
class LBLConfig:
    coefficient: float = 0.01

    def __post_init__(self):
        if not self.coefficient >= 0:
            raise ParameterError(f"LBL coefficient must be nonnegative, got {self.coefficient}")


class LinearGate:
    """p = softmax((h w + b) / tau), top-1."""

    def __init__(self, w, b, tau: float = 1.0, lbl: LBLConfig | None = None):
        self.w = w if isinstance(w, Node) else core.param(w, name="w")
        self.b = b if isinstance(b, Node) else core.param(b, name="b")
        if not tau > 0:
            raise ParameterError(f"tau must be positive, got {tau}")
        if self.b.shape != (1, self.w.shape[1]):
            raise ShapeError(f"gate bias {self.b.shape} does not match w {self.w.shape}")
        self.tau = float(tau)
        self.lbl = lbl

    @property
    def kind(self) -> str:
        return "gate+lbl" if self.lbl is not None else "gate"

    @property
    def num_experts(self) -> int:
        return self.w.shape[1]

    @classmethod
    def init(cls, dim, num_experts, rng, tau=1.0, lbl=None):
        return cls(rng.normal(0.0, 0.02, size=(dim, num_experts)), np.zeros((1, num_experts)), tau, lbl)

    def __call__(self, h) -> RoutingDecision:
        return gate_route(self, h)

    def parameters(self) -> dict:
        return {"w": self.w, "b": self.b}

    def aux_loss(self, decision: RoutingDecision) -> Node | None:
        if self.lbl is None:
            return None
        return core.scale(lbl(decision.probs_node, decision.expert_index), self.lbl.coefficient)

    def maintain(self) -> None:
        pass

    def warm_start(self, h, rng) -> None:
        pass


def gate_route(gate: LinearGate, h) -> RoutingDecision:
    h = h if isinstance(h, Node) else core.const(h)
    if h.shape[1] != gate.w.shape[0]:
        raise ShapeError(f"gate_route: tokens have width {h.shape[1]} but gate expects {gate.w.shape[0]}")
    logits = core.add_row(core.matmul(h, gate.w), gate.b)
    return decide(core.softmax_rows(logits, gate.tau), energies=None)


def lbl(probs, expert_index) -> Node:
    """K * sum_k f_k * P_k.

    ``f_k`` is the fraction of tokens sent to expert k (a constant),
    ``P_k`` the mean routing probability of expert k (differentiable).
    """
    probs = probs if isinstance(probs, Node) else core.const(probs)
    n, k = probs.shape
    expert_index = np.asarray(expert_index, dtype=np.int64)
    if expert_index.shape != (n,):
        raise ShapeError(f"lbl: {n} probability rows but {expert_index.shape} indices")
    f = np.bincount(expert_index, minlength=k).astype(np.float64) / n
    weights = np.broadcast_to(f * (k / n), (n, k))
    return core.total(core.mul(probs, np.ascontiguousarray(weights)))
