"""Training loop, evaluation, load statistics and the linear-probe protocol."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import core, kernels
from .baselines import LinearGate
from .data import LabeledImages, hflip, normalize
from .errors import ConfigError, ContractError, NumericError
from .router import EigenRouter, ortho_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    optimizer: str = "adam"
    batch_size: int = 64
    steps: int = 3000
    lambda_ortho: float = 1e-2
    qr_interval: int = 10
    seed: int = 0
    warmup_steps: int = 0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    flip: bool = True
    log_every: int = 1
    eval_every: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"train.lr must be nonnegative, got {self.lr}")
        if self.steps < 1:
            raise ConfigError(f"train.steps must be at least 1, got {self.steps}")
        if self.qr_interval < 1:
            raise ConfigError(f"train.qr_interval must be at least 1, got {self.qr_interval}")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ConfigError(f"train.optimizer must be adam or sgd-momentum, got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")


# ---------------------------------------------------------------- optimizers


class Adam:
    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = {n: np.zeros(p.shape) for n, p in params.items()}
        self.v = {n: np.zeros(p.shape) for n, p in params.items()}
        self.t = 0

    def step(self, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for n, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            m, v = self.m[n], self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.value.shape[0] > 1 and p.value.shape[1] > 1:
                update = update + self.wd * p.value
            p.value = p.value - lr * update


class SGDMomentum:
    def __init__(self, params: dict, lr, momentum=0.9, weight_decay=0.0):
        self.params, self.lr, self.mu, self.wd = params, lr, momentum, weight_decay
        self.buf = {n: np.zeros(p.shape) for n, p in params.items()}

    def step(self, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        for n, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            if self.wd:
                g = g + self.wd * p.value
            b = self.buf[n]
            b *= self.mu
            b += g
            p.value = p.value - lr * b


def make_optimizer(params: dict, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    return SGDMomentum(params, cfg.lr, cfg.momentum, cfg.weight_decay)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Constant rate with optional linear warm-up; ``step`` counts from 1."""
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr


# ---------------------------------------------------------------- losses & steps


def aux_terms(routers, decisions, lambda_ortho: float) -> dict:
    """Per-block auxiliary losses: orthonormality for eigen routers, LBL for gate+lbl."""
    terms = {}
    for i, router in routers.items():
        if isinstance(router, EigenRouter):
            terms[f"ortho.{i}"] = ortho_loss(router.basis, lambda_ortho)
        elif isinstance(router, LinearGate) and router.lbl is not None:
            terms[f"lbl.{i}"] = router.aux_loss(decisions[i])
    return terms


def compose_loss(task_loss, aux: dict):
    """Sum the task loss and auxiliary terms; returns (total node, component floats)."""
    total = task_loss
    parts = {"task": float(task_loss.value[0, 0])}
    for name, node in aux.items():
        total = core.add(total, node)
        parts[name] = float(node.value[0, 0])
    parts["total"] = float(total.value[0, 0])
    return total, parts


def train_step(model, batch, cfg: TrainConfig, optimizer, step: int) -> dict:
    """One optimization step on ``(images, labels)``; ``step`` counts from 1.

    Returns the loss components (``task`` is cross-entropy). QR maintenance of
    every eigen basis runs when ``step % qr_interval == 0``.
    """
    images, labels = batch
    res = model.forward(images)
    ce = core.cross_entropy(res.logits, labels)
    routers = {i: layer.router for i, layer in model.moe_layers.items()}
    total, parts = compose_loss(ce, aux_terms(routers, res.decisions, cfg.lambda_ortho))
    if not all(math.isfinite(v) for v in parts.values()):
        snapshot = {n: float(np.abs(p.value).max()) for n, p in model.params.items()}
        raise NumericError(f"non-finite loss at step {step}: {parts}; max |param| per tensor: {snapshot}")
    grads = core.backward(total)
    optimizer.step(grads, lr_at(cfg, step))
    if step % cfg.qr_interval == 0:
        model.maintain()
    parts["accuracy"] = float((res.logits.value.argmax(axis=1) == labels).mean())
    parts["_decisions"] = res.decisions
    return parts


# ---------------------------------------------------------------- load statistics


@dataclass
class LoadStats:
    """Expert x class tallies of routed patch tokens for one MoE block."""

    num_experts: int
    num_classes: int
    counts: np.ndarray = None
    tokens_seen: int = 0
    images_per_class: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_experts, self.num_classes), dtype=np.int64)
        if self.images_per_class is None:
            self.images_per_class = np.zeros(self.num_classes, dtype=np.int64)

    def merge(self, other: "LoadStats") -> "LoadStats":
        return LoadStats(self.num_experts, self.num_classes, self.counts + other.counts,
                         self.tokens_seen + other.tokens_seen, self.images_per_class + other.images_per_class)

    def expert_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def heatmap(self) -> np.ndarray:
        """Average routed tokens per image of each class (experts x classes)."""
        per = np.maximum(self.images_per_class, 1)
        return self.counts / per[None, :]


def accumulate_load(stats: LoadStats, decision, labels, image_labels=None) -> LoadStats:
    """Add one routing decision. ``labels`` gives the class of each routed token.

    ``image_labels`` (optional) are the per-image labels, used to count images.
    Class tokens are never routed, so they never appear here.
    """
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.asarray(decision.expert_index, dtype=np.int64)
    if labels.shape != idx.shape:
        raise ContractError(f"{idx.size} routed tokens but {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= stats.num_classes):
        raise ContractError(f"label outside [0, {stats.num_classes})")
    if idx.size and idx.max() >= stats.num_experts:
        raise ContractError(f"expert index outside [0, {stats.num_experts})")
    stats.counts += kernels.count_routes(idx, labels, stats.num_experts, stats.num_classes)
    stats.tokens_seen += int(idx.size)
    if image_labels is not None:
        stats.images_per_class += np.bincount(np.asarray(image_labels, dtype=np.int64), minlength=stats.num_classes)
    return stats


def balance_metrics(stats: LoadStats) -> dict:
    """max/min expert load ratio, normalized entropy of the load, coefficient of variation."""
    if stats.tokens_seen <= 0:
        raise ContractError("no routed tokens recorded")
    m = stats.expert_totals().astype(np.float64)
    return load_metrics(m)


def load_metrics(m) -> dict:
    m = np.asarray(m, dtype=np.float64)
    k = m.size
    ratio = math.inf if m.min() == 0 else float(m.max() / m.min())
    q = m / m.sum()
    nz = q[q > 0]
    entropy = float(-(nz * np.log(nz)).sum() / math.log(k)) if k > 1 else 1.0
    cv = float(m.std() / m.mean())
    return {"max_min_ratio": ratio, "entropy": entropy, "cv": cv, "dead_experts": int((m == 0).sum())}


# ---------------------------------------------------------------- evaluation


def batches(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    features: np.ndarray
    load: dict = field(default_factory=dict)  # block -> LoadStats


def evaluate(model, data: LabeledImages, mean, std, batch_size=256) -> EvalResult:
    cfg = model.config
    load = {i: LoadStats(cfg.K, data.num_classes) for i in model.moe_layers}
    losses, correct, feats = 0.0, 0, []
    for idx in batches(len(data), batch_size):
        x = normalize(data.images[idx], mean, std)
        y = data.labels[idx]
        res = model.forward(x)
        losses += core.cross_entropy(res.logits, y).value[0, 0] * idx.size
        correct += int((res.logits.value.argmax(axis=1) == y).sum())
        feats.append(res.features)
        tok_labels = np.repeat(y, cfg.num_patches)
        for i, dec in res.decisions.items():
            accumulate_load(load[i], dec, tok_labels, y)
    n = max(len(data), 1)
    feats = np.concatenate(feats) if feats else np.zeros((0, cfg.embed_dim))
    return EvalResult(losses / n, correct / n, feats, load)


def extract_features(model, data: LabeledImages, mean, std, batch_size=256) -> np.ndarray:
    return evaluate(model, data, mean, std, batch_size).features


# ---------------------------------------------------------------- linear probe


def fit_softmax_regression(x, y, num_classes, l2=1e-4, tol=1e-6, max_iter=10000):
    """Full-batch gradient descent on L2-regularized multinomial logistic regression.

    Stops when the gradient norm falls below ``tol``. Returns ``(W, b, iterations)``.
    """
    n, d = x.shape
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    # Lipschitz bound of the gradient: 0.5 * lambda_max(X^T X / n) + l2
    lip = 0.5 * (np.linalg.norm(x, 2) ** 2 / n + 1.0) + l2
    step = 1.0 / lip
    it = 0
    for it in range(1, max_iter + 1):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        r = (p - onehot) / n
        gw = x.T @ r + l2 * w
        gb = r.sum(axis=0)
        if math.sqrt((gw * gw).sum() + (gb * gb).sum()) < tol:
            break
        w -= step * gw
        b -= step * gb
    return w, b, it


def linear_probe(features, labels, split, num_classes=None, l2=1e-4, tol=1e-6, max_iter=10000) -> float:
    """Train on the support rows of ``split = (support_idx, query_idx)``, return query top-1 accuracy."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    support, query = (np.asarray(s, dtype=np.int64) for s in split)
    num_classes = num_classes or int(labels.max()) + 1
    xs = features[support]
    mu, sd = xs.mean(axis=0), xs.std(axis=0)
    # layer-normed features lose one rank to centering, so D - 1 is full here
    if np.linalg.matrix_rank(xs - mu) < min(xs.shape[0] - 1, xs.shape[1] - 1) or (sd == 0).any():
        log.warning("linear probe: support features are rank deficient; relying on L2=%g", l2)
    sd = np.where(sd > 0, sd, 1.0)
    w, b, _ = fit_softmax_regression((xs - mu) / sd, labels[support], num_classes, l2, tol, max_iter)
    pred = (((features[query] - mu) / sd) @ w + b).argmax(axis=1)
    return float((pred == labels[query]).mean())


# ---------------------------------------------------------------- metrics log & exports


class MetricsLog:
    """Append-only JSON-lines log, one record per call."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("a")

    def write(self, record: dict):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def write_heatmap_csv(path, stats: LoadStats, class_names=None):
    """Experts x classes CSV of average routed tokens per image of each class."""
    hm = stats.heatmap()
    names = class_names or [str(c) for c in range(stats.num_classes)]
    lines = ["expert," + ",".join(names)]
    for k in range(stats.num_experts):
        lines.append(f"{k}," + ",".join(repr(float(v)) for v in hm[k]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_heatmap_pgm(path, stats: LoadStats, cell=16):
    """Binary greyscale PGM, one ``cell x cell`` block per (expert, class); white = busiest."""
    hm = stats.heatmap()
    top = hm.max()
    grey = np.zeros_like(hm, dtype=np.uint8) if top <= 0 else np.rint(255 * hm / top).astype(np.uint8)
    img = np.kron(grey, np.ones((cell, cell), dtype=np.uint8))
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def train(model, train_data: LabeledImages, cfg: TrainConfig, mean, std, metrics: MetricsLog | None = None,
          test_data: LabeledImages | None = None, rng=None):
    """Run ``cfg.steps`` optimization steps; returns the list of per-step records."""
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 7])
    optimizer = make_optimizer(model.params, cfg)
    n = len(train_data)
    order = rng.permutation(n)
    pos = 0
    history = []
    load = {i: LoadStats(model.config.K, train_data.num_classes) for i in model.moe_layers}
    for step in range(1, cfg.steps + 1):
        if pos + cfg.batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        images = train_data.images[idx]
        if cfg.flip:
            images = hflip(images, rng)
        labels = train_data.labels[idx]
        parts = train_step(model, (normalize(images, mean, std), labels), cfg, optimizer, step)
        decisions = parts.pop("_decisions")
        tok_labels = np.repeat(labels, model.config.num_patches)
        for i, dec in decisions.items():
            accumulate_load(load[i], dec, tok_labels, labels)
        record = {"step": step, "loss": parts}
        if decisions:
            record["balance"] = {str(i): balance_metrics(load[i]) for i in sorted(load)}
        if test_data is not None and cfg.eval_every and step % cfg.eval_every == 0:
            ev = evaluate(model, test_data, mean, std)
            record["eval"] = {"loss": ev.loss, "accuracy": ev.accuracy}
        history.append(record)
        if metrics is not None and (step % cfg.log_every == 0 or step == cfg.steps or "eval" in record):
            metrics.write(_jsonable(record))
    return history, load


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def config_dict(cfg) -> dict:
    return asdict(cfg)
