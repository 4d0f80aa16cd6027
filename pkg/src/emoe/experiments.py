"""Desk-scale routing experiment: a single MoE layer trained on clustered tokens.

Each cluster carries its own target map, so experts must specialize. The same
data, task, optimizer and step budget are used for every router kind; only the
router differs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .baselines import LBLConfig, LinearGate
from .data import SyntheticSpec, gen_clustered_tokens
from .moe import MoELayer, moe_forward
from .router import EigenRouter
from .train import Adam, LoadStats, accumulate_load, aux_terms, balance_metrics, compose_loss


@dataclass
class RoutingExperiment:
    dim: int = 64
    rank: int = 16
    num_experts: int = 8
    num_clusters: int = 8
    steps: int = 2000
    batch_per_cluster: int = 32
    lr: float = 1e-3
    lambda_ortho: float = 1e-2
    qr_interval: int = 10
    lbl_coefficient: float = 0.01
    alpha: float = 0.1
    target_scale: float = 1.0
    within_variance: float = 0.25
    noise_variance: float = 0.05
    offset: float = 3.0
    offset_spread: float = 0.3
    pi_assign: float = 1.0
    eval_tokens_per_cluster: int = 256


def make_router(kind: str, exp: RoutingExperiment, rng):
    if kind == "eigen":
        return EigenRouter.init(exp.dim, exp.rank, exp.num_experts, rng, assign=exp.pi_assign,
                                lambda_ortho=exp.lambda_ortho)
    lbl = LBLConfig(exp.lbl_coefficient) if kind == "gate+lbl" else None
    return LinearGate.init(exp.dim, exp.num_experts, rng, lbl=lbl)


def run(kind: str, seed: int, exp: RoutingExperiment | None = None, trace=None) -> dict:
    """Train one layer; return final balance metrics on a held-out sample plus loss history."""
    exp = exp or RoutingExperiment()
    spec = SyntheticSpec(exp.num_clusters, exp.dim, exp.batch_per_cluster, exp.within_variance,
                         exp.noise_variance, exp.offset, exp.offset_spread, seed=seed)
    init_rng = np.random.default_rng([seed, 11])
    targets = init_rng.normal(0.0, exp.target_scale / np.sqrt(exp.dim), size=(exp.num_clusters, exp.dim, exp.dim))
    router = make_router(kind, exp, init_rng)
    layer = MoELayer.init(exp.dim, exp.dim // 2, router, init_rng, alpha=exp.alpha)
    params = layer.parameters()
    opt = Adam(params, exp.lr)

    def target(h, labels):
        return h + np.tanh(np.einsum("nd,nde->ne", h, targets[labels]))

    warm, _ = gen_clustered_tokens(spec, seed=seed * 100003 + 1)
    router.warm_start(warm, init_rng)
    losses = []
    for step in range(1, exp.steps + 1):
        h, labels = gen_clustered_tokens(spec, seed=seed * 100003 + 1 + step)
        out, dec = moe_forward(layer, h)
        err = core.sub(out, target(h, labels))
        task = core.scale(core.total(core.square(err)), 1.0 / h.shape[0])
        total, parts = compose_loss(task, aux_terms({0: router}, {0: dec}, exp.lambda_ortho))
        opt.step(core.backward(total))
        if step % exp.qr_interval == 0:
            router.maintain()
        losses.append(parts["task"])
        if trace is not None:
            trace.append(np.bincount(dec.expert_index, minlength=exp.num_experts))

    eval_spec = SyntheticSpec(exp.num_clusters, exp.dim, exp.eval_tokens_per_cluster, exp.within_variance,
                              exp.noise_variance, exp.offset, exp.offset_spread, seed=seed)
    h, labels = gen_clustered_tokens(eval_spec, seed=seed * 100003 + 7)
    dec = router(h)
    stats = accumulate_load(LoadStats(exp.num_experts, exp.num_clusters), dec, labels)
    metrics = balance_metrics(stats)
    metrics["final_task_loss"] = float(np.mean(losses[-50:]))
    metrics["loads"] = stats.expert_totals().tolist()
    metrics["counts"] = stats.counts
    return metrics
