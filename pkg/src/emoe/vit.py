"""Minimal pre-norm ViT with MoE branches on selected blocks."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import core
from .baselines import LBLConfig, LinearGate
from .core import Node
from .errors import ConfigError, ContractError, ShapeError
from .moe import Expert, MoELayer, moe_delta
from .router import EigenBasis, EigenRouter, RouterParams, init_pi, random_orthonormal

ROUTER_KINDS = ("eigen", "gate", "gate+lbl")


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_hidden: int = 128
    moe_block_indices: tuple = (1, 3)
    num_classes: int = 10
    r: int = 16
    K: int = 8
    expert_hidden: int = 0  # 0 means embed_dim // 2
    router: str = "eigen"
    tau: float = 1.0
    eps: float = 1e-6
    lbl_coefficient: float = 0.01
    alpha_init: float = 0.1
    pi_assign: float = 1.0
    scale_by_gate: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.moe_block_indices = tuple(sorted(set(int(i) for i in self.moe_block_indices)))
        self.validate()

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        bad = [i for i in self.moe_block_indices if not 0 <= i < self.depth]
        if bad:
            raise ConfigError(f"moe_block_indices {bad} outside [0, {self.depth})")
        if not self.r < self.embed_dim:
            raise ConfigError(f"r={self.r} must be smaller than embed_dim={self.embed_dim}")
        if self.router not in ROUTER_KINDS:
            raise ConfigError(f"router must be one of {ROUTER_KINDS}, got {self.router!r}")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if not self.hidden < self.embed_dim:
            raise ConfigError(f"expert_hidden {self.hidden} must be below embed_dim {self.embed_dim}")

    @property
    def hidden(self) -> int:
        return self.expert_hidden or self.embed_dim // 2

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_text(self) -> str:
        """Canonical ``key = value`` text, one line per field in declaration order."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ViTConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in kinds:
                raise ConfigError(f"unknown model config key {key!r}")
            current = getattr(defaults, key)
            if isinstance(current, tuple):
                values[key] = tuple(int(x) for x in raw.split(",") if x.strip())
            elif isinstance(current, bool):
                values[key] = raw == "true"
            elif isinstance(current, int):
                values[key] = int(raw)
            elif isinstance(current, float):
                values[key] = float(raw)
            else:
                values[key] = raw
        return cls(**values)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut ``(B, H, W, C)`` images into non-overlapping patches.

    Returns a ``(B * P) x (p * p * C)`` matrix. Patches are ordered row-major
    over the patch grid; inside a patch values run row, then column, then
    channel.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b, hgt, wid, c = images.shape
    p = patch_size
    if hgt % p or wid % p:
        raise ConfigError(f"image {hgt}x{wid} not divisible by patch size {p}")
    x = images.reshape(b, hgt // p, p, wid // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b * (hgt // p) * (wid // p), p * p * c)


def mhsa(x, w: dict, seq_len: int, heads: int) -> Node:
    """Multi-head self-attention with q/k/v/output projections."""
    q = core.add_row(core.matmul(x, w["wq"]), w["bq"])
    k = core.add_row(core.matmul(x, w["wk"]), w["bk"])
    v = core.add_row(core.matmul(x, w["wv"]), w["bv"])
    a = core.attention(q, k, v, seq_len, heads)
    return core.add_row(core.matmul(a, w["wo"]), w["bo"])


def feed_forward(x, w: dict) -> Node:
    hdn = core.gelu(core.add_row(core.matmul(x, w["w1"]), w["b1"]))
    return core.add_row(core.matmul(hdn, w["w2"]), w["b2"])


@dataclass
class ForwardResult:
    logits: Node
    features: np.ndarray  # final normalized class-token representations
    decisions: dict = field(default_factory=dict)  # block index -> RoutingDecision
    router_inputs: dict = field(default_factory=dict)  # block index -> ndarray


class ViT:
    """Parameters live in ``self.params`` under canonical names."""

    def __init__(self, config: ViTConfig, params: dict | None = None, rng=None):
        self.config = config
        if params is None:
            params = init_params(config, rng if rng is not None else np.random.default_rng(0))
        expected = set(param_shapes(config))
        if set(params) != expected:
            missing, extra = expected - set(params), set(params) - expected
            raise ShapeError(f"parameter names mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, shape in param_shapes(config).items():
            v = params[name]
            node = v if isinstance(v, Node) else core.param(v, name=name)
            if node.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {node.shape}")
            params[name] = node
        self.params = params
        self.moe_layers = {i: self._build_moe(i) for i in config.moe_block_indices}
        self.moe_enabled = True

    def _build_moe(self, i) -> MoELayer:
        cfg, p = self.config, self.params
        pre = f"blocks.{i}.moe"
        if cfg.router == "eigen":
            rp = RouterParams(p[f"{pre}.router.gamma"], p[f"{pre}.router.pi"], p[f"{pre}.router.bias"],
                              tau=cfg.tau, eps=cfg.eps)
            router = EigenRouter(EigenBasis(p[f"{pre}.router.U"]), rp)
        else:
            lbl = LBLConfig(cfg.lbl_coefficient) if cfg.router == "gate+lbl" else None
            router = LinearGate(p[f"{pre}.router.w"], p[f"{pre}.router.b"], tau=cfg.tau, lbl=lbl)
        experts = [
            Expert(*(p[f"{pre}.expert{k}.{n}"] for n in ("w_in", "b_in", "w_out", "b_out")))
            for k in range(cfg.K)
        ]
        return MoELayer(experts, router, alpha=p[f"{pre}.alpha"], scale_by_gate=cfg.scale_by_gate)

    def routers(self):
        return [layer.router for layer in self.moe_layers.values()]

    def forward(self, images, capture: bool = False) -> ForwardResult:
        cfg, p = self.config, self.params
        patches = patchify(images, cfg.patch_size)
        b = patches.shape[0] // cfg.num_patches
        t = cfg.num_patches + 1
        cls_rows = np.arange(b) * t
        patch_rows = np.setdiff1d(np.arange(b * t), cls_rows)

        emb = core.add_row(core.matmul(patches, p["patch_embed.w"]), p["patch_embed.b"])
        cls = core.take_rows(p["cls_token"], np.zeros(b, dtype=np.int64))
        x = core.scatter_rows([(cls, cls_rows), (emb, patch_rows)], b * t, cfg.embed_dim)
        x = core.add(x, core.take_rows(p["pos_embed"], np.tile(np.arange(t), b)))

        result = ForwardResult(logits=None, features=None)
        for i in range(cfg.depth):
            x = self.block_forward(i, x, t, result, capture)

        cls_out = core.take_rows(x, cls_rows)
        feats = core.layernorm(cls_out, p["norm.gain"], p["norm.bias"], cfg.ln_eps)
        result.features = feats.value
        result.logits = core.add_row(core.matmul(feats, p["head.w"]), p["head.b"])
        return result

    def block_forward(self, i, x, seq_len, result=None, capture=False) -> Node:
        """One pre-norm block; the MoE branch only sees patch rows."""
        cfg = self.config
        rows = x.shape[0]
        if seq_len < 2:
            raise ContractError("block needs at least one patch token besides the class token")
        w = {n: self.params[f"blocks.{i}.{n}"] for n in _BLOCK_NAMES}
        u = core.layernorm(x, w["ln1.gain"], w["ln1.bias"], cfg.ln_eps)
        x = core.add(x, mhsa(u, w, seq_len, cfg.heads))
        u = core.layernorm(x, w["ln2.gain"], w["ln2.bias"], cfg.ln_eps)
        base = core.add(x, feed_forward(u, w))
        layer = self.moe_layers.get(i)
        if layer is None or not self.moe_enabled:
            return base
        cls_rows = np.arange(0, rows, seq_len)
        patch_rows = np.setdiff1d(np.arange(rows), cls_rows)
        u_patch = core.take_rows(u, patch_rows)
        if capture and result is not None:
            result.router_inputs[i] = u_patch.value
        delta, decision = moe_delta(layer, u_patch)
        if result is not None:
            result.decisions[i] = decision
        return core.scatter_rows(
            [(core.take_rows(base, cls_rows), cls_rows), (core.add(core.take_rows(base, patch_rows), delta), patch_rows)],
            rows,
            cfg.embed_dim,
        )

    def warm_start(self, images, rng) -> None:
        """Initialize each eigen basis from router inputs of a warm-up batch, in block order."""
        for i, layer in self.moe_layers.items():
            res = self.forward(images, capture=True)
            layer.router.warm_start(res.router_inputs[i], rng)

    def maintain(self) -> None:
        for r in self.routers():
            r.maintain()

    def state(self) -> dict:
        return {n: node.value for n, node in self.params.items()}

    def load_state(self, state: dict) -> None:
        for n, node in self.params.items():
            v = state[n]
            if v.shape != node.shape:
                raise ShapeError(f"{n}: expected shape {node.shape}, got {v.shape}")
            node.value = np.array(v, dtype=np.float64)


_BLOCK_NAMES = (
    "ln1.gain", "ln1.bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2.gain", "ln2.bias", "w1", "b1", "w2", "b2",
)


def param_shapes(cfg: ViTConfig) -> dict:
    d, hid = cfg.embed_dim, cfg.mlp_hidden
    shapes = {
        "patch_embed.w": (cfg.patch_dim, d),
        "patch_embed.b": (1, d),
        "cls_token": (1, d),
        "pos_embed": (cfg.num_patches + 1, d),
    }
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        block = {
            "ln1.gain": (1, d), "ln1.bias": (1, d),
            "wq": (d, d), "bq": (1, d), "wk": (d, d), "bk": (1, d),
            "wv": (d, d), "bv": (1, d), "wo": (d, d), "bo": (1, d),
            "ln2.gain": (1, d), "ln2.bias": (1, d),
            "w1": (d, hid), "b1": (1, hid), "w2": (hid, d), "b2": (1, d),
        }
        shapes.update({f"{pre}.{k}": v for k, v in block.items()})
        if i in cfg.moe_block_indices:
            m = f"{pre}.moe"
            shapes[f"{m}.alpha"] = (1, 1)
            if cfg.router == "eigen":
                shapes.update({
                    f"{m}.router.U": (d, cfg.r),
                    f"{m}.router.gamma": (1, cfg.r),
                    f"{m}.router.pi": (cfg.r, cfg.K),
                    f"{m}.router.bias": (1, cfg.K),
                })
            else:
                shapes.update({f"{m}.router.w": (d, cfg.K), f"{m}.router.b": (1, cfg.K)})
            for k in range(cfg.K):
                shapes.update({
                    f"{m}.expert{k}.w_in": (d, cfg.hidden),
                    f"{m}.expert{k}.b_in": (1, cfg.hidden),
                    f"{m}.expert{k}.w_out": (cfg.hidden, d),
                    f"{m}.expert{k}.b_out": (1, d),
                })
    shapes.update({
        "norm.gain": (1, d), "norm.bias": (1, d),
        "head.w": (d, cfg.num_classes), "head.b": (1, cfg.num_classes),
    })
    return shapes


def init_params(cfg: ViTConfig, rng: np.random.Generator) -> dict:
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain" or leaf == "gamma":
            v = np.ones(shape)
        elif leaf == "alpha":
            v = np.full(shape, cfg.alpha_init)
        elif leaf == "U":
            v = random_orthonormal(shape[0], shape[1], rng)
        elif leaf == "pi":
            v = init_pi(shape[0], shape[1], rng, cfg.pi_assign)
        elif leaf in ("b", "bias", "b_in", "b_out", "b1", "b2", "bq", "bk", "bv", "bo") or name == "cls_token":
            v = np.zeros(shape)
        else:
            v = rng.normal(0.0, 0.02, size=shape)
        out[name] = core.param(v, name=name)
    return out
