"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core

STEP = 1e-5
TOLERANCE = 1e-4
# denominators below this are treated as this (gradients that are numerically 0)
REL_FLOOR = 1e-6


@dataclass
class Entry:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def check(loss_fn, params: dict, step=STEP, sample=None, rng=None, signature=None, perturb=0.0):
    """Compare analytic and central-difference gradients of ``loss_fn()``.

    ``params`` maps names to leaf nodes. ``sample`` limits the check to that
    many (or that fraction, if < 1) randomly chosen entries per parameter.
    ``signature`` is an optional callable returning a hashable summary of the
    discrete state (e.g. routing choices); entries whose perturbation changes
    it are skipped because the loss is not differentiable across that jump.

    ``perturb`` scales the analytic gradient by ``1 + perturb`` (negative
    control for the checker itself).

    Returns ``(entries, skipped)``.
    """
    loss = loss_fn()
    grads = core.backward(loss)
    base_sig = signature() if signature else None
    entries, skipped = [], []
    rng = rng or np.random.default_rng(0)
    for name, node in params.items():
        g = grads.get(node)
        if g is None:
            g = np.zeros(node.shape)
        flat = node.value.reshape(-1)
        idxs = np.arange(flat.size)
        if sample is not None:
            count = max(1, int(round(sample * flat.size))) if sample < 1 else min(int(sample), flat.size)
            idxs = np.sort(rng.choice(flat.size, size=count, replace=False))
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            plus = loss_fn().value[0, 0]
            sig_plus = signature() if signature else None
            flat[i] = orig - step
            minus = loss_fn().value[0, 0]
            sig_minus = signature() if signature else None
            flat[i] = orig
            pos = np.unravel_index(i, node.shape)
            if signature and (sig_plus != base_sig or sig_minus != base_sig):
                skipped.append((name, pos))
                continue
            analytic = float(g[pos]) * (1.0 + perturb)
            entries.append(Entry(name, tuple(int(p) for p in pos), analytic, (plus - minus) / (2 * step)))
    return entries, skipped


def worst(entries) -> Entry | None:
    return max(entries, key=lambda e: e.rel_error, default=None)


# ---------------------------------------------------------------- standard suite


def _uniform(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _core_cases(rng):
    a = core.param(_uniform(rng, (4, 5)), "a")
    b = core.param(_uniform(rng, (5, 3)), "b")
    row = core.param(_uniform(rng, (1, 5)), "row")
    col = core.param(_uniform(rng, (4, 1)), "col")
    s = core.param(_uniform(rng, (1, 1)), "s")
    gain = core.param(_uniform(rng, (1, 5)), "gain")
    bias = core.param(_uniform(rng, (1, 5)), "bias")
    labels = rng.integers(0, 5, size=4)
    q = core.param(_uniform(rng, (6, 4)), "q")
    k = core.param(_uniform(rng, (6, 4)), "k")
    v = core.param(_uniform(rng, (6, 4)), "v")
    # fixed random weights turn each op output into a scalar loss
    w = {"lf": _uniform(rng, (4, 5), -1, 1), "lf3": _uniform(rng, (4, 3), -1, 1), "att": _uniform(rng, (6, 4), -1, 1)}
    idx = np.array([3, 0, 0, 2])
    return {
        "matmul": (lambda: core.total(core.mul(core.matmul(a, b), w["lf3"])), {"a": a, "b": b}),
        "add_row/mul_row": (lambda: core.total(core.mul(core.mul_row(core.add_row(a, row), row), w["lf"])),
                            {"a": a, "row": row}),
        "mul_col/mul_scalar": (lambda: core.total(core.mul(core.mul_scalar(core.mul_col(a, col), s), w["lf"])),
                               {"a": a, "col": col, "s": s}),
        "square/transpose": (lambda: core.total(core.matmul(core.square(a), core.transpose(core.square(a)))),
                             {"a": a}),
        "softmax_rows": (lambda: core.total(core.mul(core.softmax_rows(a, 0.7), w["lf"])), {"a": a}),
        "gelu": (lambda: core.total(core.mul(core.gelu(a), w["lf"])), {"a": a}),
        "layernorm": (lambda: core.total(core.mul(core.layernorm(a, gain, bias, 1e-5), w["lf"])),
                      {"a": a, "gain": gain, "bias": bias}),
        "energy": (lambda: core.total(core.mul(core.energy(a, 1e-6), w["lf"])), {"a": a}),
        "cross_entropy": (lambda: core.cross_entropy(a, labels), {"a": a}),
        "take_rows/pick": (lambda: core.total(core.mul(core.take_rows(a, idx), w["lf"]))
                           + core.total(core.pick(a, idx)), {"a": a}),
        "attention": (lambda: core.total(core.mul(core.attention(q, k, v, 3, 2), w["att"])), {"q": q, "k": k, "v": v}),
    }


def _router_cases(rng):
    from .router import EigenBasis, RouterParams, ortho_loss, project, scores
    from .router import energy as energy_op

    h = core.const(_uniform(rng, (10, 6)))
    basis = EigenBasis(core.param(_uniform(rng, (6, 3)) * 0.5, "U"))
    params = RouterParams(_uniform(rng, (1, 3)), _uniform(rng, (3, 4)), _uniform(rng, (1, 4)), tau=0.8)
    wp = _uniform(rng, (10, 4), -1, 1)

    def pipeline():
        e = energy_op(project(h, basis), params.eps)
        p = core.softmax_rows(scores(e, params), params.tau)
        return core.add(core.total(core.mul(p, wp)), ortho_loss(basis, 0.3))

    pset = {"U": basis.U, **params.parameters()}
    return {
        "energy->scores->softmax + L_ortho": (pipeline, pset),
        "L_ortho": (lambda: ortho_loss(basis, 1.7), {"U": basis.U}),
    }


def _moe_cases(rng):
    from .moe import Expert, MoELayer, expert_forward, moe_forward
    from .router import EigenBasis, EigenRouter, RouterParams

    d = 6
    h = core.param(_uniform(rng, (12, d)), "h")
    expert = Expert(_uniform(rng, (d, 3)) * 0.5, _uniform(rng, (1, 3)), _uniform(rng, (3, d)) * 0.5, _uniform(rng, (1, d)))
    router = EigenRouter(EigenBasis(core.param(_uniform(rng, (d, 3)) * 0.5, "U")),
                         RouterParams(_uniform(rng, (1, 3)), _uniform(rng, (3, 3)) * 2, _uniform(rng, (1, 3)) * 0.3))
    experts = [Expert(_uniform(rng, (d, 3)) * 0.5, _uniform(rng, (1, 3)), _uniform(rng, (3, d)) * 0.5,
                      _uniform(rng, (1, d))) for _ in range(3)]
    layer = MoELayer(experts, router, alpha=0.8, scale_by_gate=True)
    we = _uniform(rng, (12, d), -1, 1)

    def moe_loss():
        out, _ = moe_forward(layer, h)
        return core.total(core.mul(out, we))

    return {
        "expert MLP": (lambda: core.total(core.mul(expert_forward(expert, h), we)), {"h": h, **expert.parameters()}),
        "moe_forward (scale_by_gate)": (moe_loss, {"h": h, **layer.parameters()},
                                        lambda: tuple(router(h.value).expert_index)),
    }


def small_backbone(rng, router="eigen"):
    """2-block, D=16 ViT with O(1) random parameters for gradient checks."""
    from .vit import ViT, ViTConfig

    cfg = ViTConfig(image_size=8, patch_size=4, channels=3, embed_dim=16, depth=2, heads=2, mlp_hidden=24,
                    moe_block_indices=(1,), num_classes=5, r=4, K=4, router=router, alpha_init=0.5)
    model = ViT(cfg, rng=rng)
    for name, node in model.params.items():
        rows, cols = node.shape
        if name.endswith(".U"):
            continue
        if name.endswith("gain") or name.endswith("gamma"):
            node.value = 1.0 + _uniform(rng, node.shape, -0.5, 0.5)
        elif rows > 1:
            node.value = _uniform(rng, node.shape, -1.0, 1.0) * np.sqrt(3.0 / rows)
        else:
            node.value = _uniform(rng, node.shape, -0.5, 0.5)
    return model


def _backbone_cases(rng, sample):
    model = small_backbone(rng)
    images = rng.normal(size=(3, 8, 8, 3))
    labels = rng.integers(0, 5, size=3)

    def loss():
        return core.cross_entropy(model.forward(images).logits, labels)

    def sig():
        res = model.forward(images)
        return tuple(tuple(d.expert_index) for d in res.decisions.values())

    return {"ViT cross-entropy (2 blocks, D=16)": (loss, dict(model.params), sig, sample)}


def run_suite(seed=0, perturb=0.0, backbone_sample=0.01):
    """Run every section; returns ``{section: [(component, worst_entry, n_checked, n_skipped)]}``."""
    rng = np.random.default_rng(seed)
    sections = {
        "numeric-core": _core_cases(rng),
        "eigen-router": _router_cases(rng),
        "moe-layer": _moe_cases(rng),
        "backbone": _backbone_cases(rng, backbone_sample),
    }
    report = {}
    for section, cases in sections.items():
        rows = []
        for component, case in cases.items():
            fn, params = case[0], case[1]
            signature = case[2] if len(case) > 2 else None
            sample = case[3] if len(case) > 3 else None
            entries, skipped = check(fn, params, sample=sample, rng=rng, signature=signature, perturb=perturb)
            rows.append((component, worst(entries), len(entries), len(skipped)))
        report[section] = rows
    return report


def passed(report) -> bool:
    return all(w is not None and w.rel_error < TOLERANCE for rows in report.values() for _, w, _, _ in rows)
