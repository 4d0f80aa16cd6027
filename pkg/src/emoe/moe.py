"""Sparse top-1 mixture-of-experts layer around a router."""
from __future__ import annotations

import numpy as np

from . import core
from .core import Node
from .errors import ShapeError


class Expert:
    """Bottleneck MLP: gelu(h w_in + b_in) w_out + b_out."""

    def __init__(self, w_in, b_in, w_out, b_out, name="expert"):
        self.w_in = w_in if isinstance(w_in, Node) else core.param(w_in, name=f"{name}.w_in")
        self.b_in = b_in if isinstance(b_in, Node) else core.param(b_in, name=f"{name}.b_in")
        self.w_out = w_out if isinstance(w_out, Node) else core.param(w_out, name=f"{name}.w_out")
        self.b_out = b_out if isinstance(b_out, Node) else core.param(b_out, name=f"{name}.b_out")
        d, dh = self.w_in.shape
        if self.w_out.shape != (dh, d) or self.b_in.shape != (1, dh) or self.b_out.shape != (1, d):
            raise ShapeError("expert parameter shapes are inconsistent")
        if not dh < d:
            raise ShapeError(f"expert hidden width {dh} must be a bottleneck (< {d})")
        # instrumentation: number of forward calls and of token rows evaluated
        self.calls = 0
        self.tokens_evaluated = 0

    @classmethod
    def init(cls, dim, hidden, rng, name="expert"):
        return cls(
            rng.normal(0.0, 0.02, size=(dim, hidden)),
            np.zeros((1, hidden)),
            rng.normal(0.0, 0.02, size=(hidden, dim)),
            np.zeros((1, dim)),
            name=name,
        )

    @property
    def dim(self) -> int:
        return self.w_in.shape[0]

    def parameters(self) -> dict:
        return {"w_in": self.w_in, "b_in": self.b_in, "w_out": self.w_out, "b_out": self.b_out}


def expert_forward(expert: Expert, h) -> Node:
    h = h if isinstance(h, Node) else core.const(h)
    if h.shape[1] != expert.dim:
        raise ShapeError(f"expert expects width {expert.dim}, got tokens of shape {h.shape}")
    expert.calls += 1
    expert.tokens_evaluated += h.shape[0]
    hidden = core.gelu(core.add_row(core.matmul(h, expert.w_in), expert.b_in))
    return core.add_row(core.matmul(hidden, expert.w_out), expert.b_out)


class MoELayer:
    def __init__(self, experts, router, alpha=0.1, scale_by_gate=True):
        if len(experts) != router.num_experts:
            raise ShapeError(f"{len(experts)} experts but router scores {router.num_experts}")
        shapes = {e.w_in.shape for e in experts}
        if len(shapes) != 1:
            raise ShapeError(f"experts disagree on (D, d_h): {sorted(shapes)}")
        self.experts = list(experts)
        self.router = router
        self.alpha = alpha if isinstance(alpha, Node) else core.param([[alpha]], name="alpha")
        self.scale_by_gate = scale_by_gate

    @classmethod
    def init(cls, dim, hidden, router, rng, alpha=0.1, scale_by_gate=True):
        experts = [Expert.init(dim, hidden, rng, name=f"expert{k}") for k in range(router.num_experts)]
        return cls(experts, router, alpha=alpha, scale_by_gate=scale_by_gate)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def parameters(self) -> dict:
        out = {"alpha": self.alpha}
        for name, p in self.router.parameters().items():
            out[f"router.{name}"] = p
        for k, e in enumerate(self.experts):
            for name, p in e.parameters().items():
                out[f"expert{k}.{name}"] = p
        return out


def moe_delta(layer: MoELayer, h):
    """The residual update alpha * g_t * Expert_{k*}(h_t) and the routing decision.

    Tokens are grouped by selected expert; each expert runs once on its
    gathered rows and the results are scattered back.
    """
    h = h if isinstance(h, Node) else core.const(h)
    n, d = h.shape
    decision = layer.router(h)
    parts = []
    for k in range(layer.num_experts):
        idx = np.flatnonzero(decision.expert_index == k)
        if idx.size == 0:
            continue
        y = expert_forward(layer.experts[k], core.take_rows(h, idx))
        if layer.scale_by_gate:
            y = core.mul_col(y, core.take_rows(decision.gate_node, idx))
        parts.append((y, idx))
    delta = core.mul_scalar(core.scatter_rows(parts, n, d), layer.alpha)
    return delta, decision


def moe_forward(layer: MoELayer, patch_tokens):
    """h_t + alpha * g_t * Expert_{k*}(h_t) for every token; returns (output, decision)."""
    h = patch_tokens if isinstance(patch_tokens, Node) else core.const(patch_tokens)
    delta, decision = moe_delta(layer, h)
    return core.add(h, delta), decision
