"""Eigenbasis router: project tokens onto a learned orthonormal basis, turn the
squared coordinates into an energy distribution, score experts linearly from it
and pick the top-1 expert per token.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core, kernels
from .core import Node
from .errors import ContractError, DegeneracyError, ParameterError, ShapeError


@dataclass
class EigenBasis:
    """A D x r basis ``U`` (a learnable leaf node)."""

    U: Node

    def __post_init__(self):
        if not isinstance(self.U, Node):
            self.U = core.param(self.U, name="U")
        d, r = self.U.shape
        if not r < d:
            raise ShapeError(f"basis rank r={r} must be smaller than dimension D={d}")

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def ortho_error(self) -> float:
        """Frobenius norm of U^T U - I."""
        u = self.U.value
        return float(np.linalg.norm(u.T @ u - np.eye(u.shape[1])))


@dataclass
class RouterParams:
    gamma: Node  # 1 x r, per-dimension scale
    pi: Node  # r x K mixing matrix
    bias: Node  # 1 x K
    tau: float = 1.0
    eps: float = 1e-6
    lambda_ortho: float = 1e-2

    def __post_init__(self):
        for name in ("gamma", "pi", "bias"):
            v = getattr(self, name)
            if not isinstance(v, Node):
                setattr(self, name, core.param(v, name=name))
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not self.eps > 0:
            raise ParameterError(f"eps must be positive, got {self.eps}")
        if not self.lambda_ortho >= 0:
            raise ParameterError(f"lambda_ortho must be nonnegative, got {self.lambda_ortho}")
        r, k = self.pi.shape
        if self.gamma.shape != (1, r) or self.bias.shape != (1, k):
            raise ShapeError(f"gamma {self.gamma.shape} / bias {self.bias.shape} inconsistent with pi {self.pi.shape}")

    @property
    def num_experts(self) -> int:
        return self.pi.shape[1]

    @classmethod
    def init(cls, rank: int, num_experts: int, rng: np.random.Generator, assign: float = 1.0,
             **kw) -> "RouterParams":
        if num_experts < 1:
            raise ParameterError("need at least one expert")
        return cls(
            gamma=np.ones((1, rank)),
            pi=init_pi(rank, num_experts, rng, assign),
            bias=np.zeros((1, num_experts)),
            **kw,
        )

    def parameters(self) -> dict:
        return {"gamma": self.gamma, "pi": self.pi, "bias": self.bias}


def init_pi(rank: int, num_experts: int, rng: np.random.Generator, assign: float = 1.0) -> np.ndarray:
    """Basis direction j starts out assigned to expert ``j % K`` with weight ``assign``,
    plus N(0, 0.02^2) noise. ``assign=0`` gives the purely random start.
    """
    structured = (np.arange(rank)[:, None] % num_experts) == np.arange(num_experts)[None, :]
    return assign * structured + rng.normal(0.0, 0.02, size=(rank, num_experts))


@dataclass
class RoutingDecision:
    """Result of routing N tokens among K experts.

    ``energies`` is None for routers that do not use an eigenbasis.
    The ``*_node`` fields keep the differentiable graph for training.
    """

    energies: np.ndarray | None
    probs: np.ndarray
    expert_index: np.ndarray
    gate_score: np.ndarray
    probs_node: Node | None = field(default=None, repr=False)
    gate_node: Node | None = field(default=None, repr=False)

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]


def empirical_covariance(h) -> np.ndarray:
    """(1/N) H^T H (uncentred)."""
    h = core.as_matrix(h)
    n = h.shape[0]
    if n < 1:
        raise ContractError("empirical covariance of an empty batch")
    c = h.T @ h / n
    return 0.5 * (c + c.T)


def project(h, basis: EigenBasis) -> Node:
    h = h if isinstance(h, Node) else core.const(h)
    if h.shape[1] != basis.dim:
        raise ShapeError(f"project: tokens have width {h.shape[1]} but basis has D={basis.dim}")
    return core.matmul(h, basis.U)


def energy(z, eps: float) -> Node:
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    return core.energy(z, eps)


def scores(e, params: RouterParams) -> Node:
    """s[t, k] = sum_j gamma_j * pi[j, k] * e[t, j] + b_k."""
    e = e if isinstance(e, Node) else core.const(e)
    if e.shape[1] != params.pi.shape[0]:
        raise ShapeError(f"scores: energies have width {e.shape[1]} but pi has {params.pi.shape[0]} rows")
    return core.add_row(core.matmul(core.mul_row(e, params.gamma), params.pi), params.bias)


def decide(probs: Node, energies=None) -> RoutingDecision:
    """Top-1 selection with lowest-index tie-break."""
    idx, gate = kernels.top1(probs.value)
    return RoutingDecision(
        energies=energies,
        probs=probs.value,
        expert_index=idx,
        gate_score=gate,
        probs_node=probs,
        gate_node=core.pick(probs, idx),
    )


def route(h, basis: EigenBasis, params: RouterParams) -> RoutingDecision:
    z = project(h, basis)
    e = energy(z, params.eps)
    p = core.softmax_rows(scores(e, params), params.tau)
    return decide(p, e.value)


def ortho_loss(basis: EigenBasis, lambda_ortho: float) -> Node:
    """lambda * ||U^T U - I||_F^2 as a differentiable scalar."""
    if not lambda_ortho >= 0:
        raise ParameterError(f"lambda_ortho must be nonnegative, got {lambda_ortho}")
    u = basis.U
    gram = core.matmul(core.transpose(u), u)
    diff = core.sub(gram, np.eye(basis.rank))
    return core.scale(core.total(core.square(diff)), lambda_ortho)


def reorthonormalize_matrix(u: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Thin QR of ``u`` with positive R diagonal; returns Q."""
    q, r = np.linalg.qr(u, mode="reduced")
    diag = np.diag(r)
    limit = rtol * max(np.abs(diag).max(initial=0.0), np.finfo(float).tiny)
    bad = np.flatnonzero(np.abs(diag) <= limit)
    if bad.size:
        raise DegeneracyError(f"basis is rank deficient at column {int(bad[0])}")
    return np.ascontiguousarray(q * np.sign(diag))


def reorthonormalize(basis: EigenBasis) -> EigenBasis:
    """Return a new basis with orthonormal columns spanning the same subspace."""
    return EigenBasis(core.param(reorthonormalize_matrix(basis.U.value), name=basis.U.name))


def random_orthonormal(dim: int, rank: int, rng: np.random.Generator) -> np.ndarray:
    return reorthonormalize_matrix(rng.normal(size=(dim, rank)))


def top_eigenvectors(c: np.ndarray, rank: int, rng: np.random.Generator,
                     iters: int = 100, tol: float = 1e-8) -> tuple[np.ndarray, bool]:
    """Orthogonal (block power) iteration for the top-``rank`` eigenspace of ``c``.

    Returns ``(V, converged)`` with columns ordered by decreasing Rayleigh
    quotient. Convergence is measured by the sine of the largest principal
    angle between successive iterates.
    """
    v = random_orthonormal(c.shape[0], rank, rng)
    converged = False
    for _ in range(iters):
        v_new = reorthonormalize_matrix(c @ v)
        angle = np.linalg.norm(v_new - v @ (v.T @ v_new), 2)
        v = v_new
        if angle < tol:
            converged = True
            break
    # Rayleigh-Ritz: rotate within the subspace onto eigenvector estimates
    vals, vecs = np.linalg.eigh(v.T @ c @ v)
    v = v @ vecs[:, ::-1]
    return np.ascontiguousarray(v), converged


def init_basis(h, rank: int, rng: np.random.Generator) -> EigenBasis:
    """Basis from the top eigenvectors of the batch covariance.

    Falls back to a random orthonormal basis when the batch cannot determine a
    rank-``rank`` subspace.
    """
    h = core.as_matrix(h)
    c = empirical_covariance(h)
    try:
        if np.linalg.matrix_rank(c) < rank:
            raise DegeneracyError("covariance rank below basis rank")
        v, _ = top_eigenvectors(c, rank, rng)
    except DegeneracyError:
        v = random_orthonormal(h.shape[1], rank, rng)
    return EigenBasis(core.param(v, name="U"))


class EigenRouter:
    """Bundles a basis and router parameters behind the router interface."""

    kind = "eigen"

    def __init__(self, basis: EigenBasis, params: RouterParams):
        self.basis = basis
        self.params = params

    @classmethod
    def init(cls, dim, rank, num_experts, rng, assign=1.0, **kw):
        return cls(EigenBasis(core.param(random_orthonormal(dim, rank, rng), name="U")),
                   RouterParams.init(rank, num_experts, rng, assign, **kw))

    @property
    def num_experts(self) -> int:
        return self.params.num_experts

    def __call__(self, h) -> RoutingDecision:
        return route(h, self.basis, self.params)

    def parameters(self) -> dict:
        return {"U": self.basis.U, **self.params.parameters()}

    def aux_loss(self, decision: RoutingDecision) -> Node | None:
        return ortho_loss(self.basis, self.params.lambda_ortho)

    def maintain(self) -> None:
        """Hard re-orthonormalization of U, in place on the leaf's value."""
        self.basis.U.value = reorthonormalize_matrix(self.basis.U.value)

    def warm_start(self, h, rng) -> None:
        self.basis.U.value = init_basis(h, self.basis.rank, rng).U.value
