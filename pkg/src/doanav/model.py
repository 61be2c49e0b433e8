"""Directed object attention policy network.

Pipeline per step: intrinsic graph + view adaptive graph -> per-object
attention ``G_t``; ``G_t`` scales the reduced object features (object branch)
and builds the query that attends over position-aware image cells (image
branch); the object, image and previous-action branches are fused and fed
to an LSTM actor-critic head.

Multi-head weights are stored head-concatenated: columns
``[i*HD:(i+1)*HD]`` of ``vag.wq``/``vag.wk``/``uaia.w{q,k,v}`` belong to head
``i``.  The intrinsic graph is stored target-major: ``gn[p, q]`` is the logit
of the edge ``q -> p`` (start node q, end node/target p), so row-softmax
normalises all edges entering one target.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sim import DONE, NUM_ACTIONS, Observation

START_ACTION = NUM_ACTIONS  # previous-action index used on the first step
PIXEL_EMBED_MODES = ("none", "1d", "2d", "relative")
BRANCH_MODES = ("ed", "bs", "none")
CHECKPOINT_FORMAT = "doanav-checkpoint/1"
TOGGLES = ("use_uaoa", "use_uaia", "use_abed", "use_ig", "use_vag", "use_cf", "undirected_doa",
           "use_gcn_baseline", "done_reminder")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_classes: int = 8
    m_cells: int = 16
    d_img: int = 32
    d_vis: int = 32
    embed_dim: int = 64
    head_dim: int = 64
    n_heads: int = 4
    reduce_dim: int = 128
    lstm_hidden: int = 128
    lstm_input: int = 64
    conf_threshold: float = 0.6
    dropout_rate: float = 0.3
    done_boost: float = 2.0
    use_uaoa: bool = True
    use_uaia: bool = True
    use_abed: bool = True
    use_ig: bool = True
    use_vag: bool = True
    use_cf: bool = True
    pixel_embed: str = "1d"
    undirected_doa: bool = False
    branch_token: str = "ed"
    use_gcn_baseline: bool = False
    done_reminder: bool = True

    def validate(self) -> None:
        if self.pixel_embed not in PIXEL_EMBED_MODES:
            raise ValueError(f"pixel_embed must be one of {PIXEL_EMBED_MODES}, got {self.pixel_embed!r}")
        if self.branch_token not in BRANCH_MODES:
            raise ValueError(f"branch_token must be one of {BRANCH_MODES}, got {self.branch_token!r}")
        side = math.isqrt(self.m_cells)
        if self.pixel_embed in ("2d", "relative") and side * side != self.m_cells:
            raise ValueError(f"pixel_embed={self.pixel_embed} needs a square image grid, got M={self.m_cells}")
        for name in ("n_classes", "m_cells", "d_img", "d_vis", "embed_dim", "head_dim", "n_heads",
                     "reduce_dim", "lstm_hidden", "lstm_input"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise ValueError("conf_threshold must lie in [0, 1]")

    @property
    def branch_mode(self) -> str:
        return self.branch_token if self.use_abed else "none"

    @property
    def s_dim(self) -> int:
        return self.d_vis + 6

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def param_shapes(cfg: ModelConfig) -> dict:
    n, m, e, hd, nh = cfg.n_classes, cfg.m_cells, cfg.embed_dim, cfg.head_dim, cfg.n_heads
    side = math.isqrt(m)
    hid = cfg.lstm_hidden
    return {
        "oi.w1": (n, e), "oi.b1": (1, e), "oi.w2": (e, e), "oi.b2": (1, e),
        "gn": (n, n), "w_n": (1, 1), "w_v": (1, 1),
        "vag.wq": (cfg.d_img + e, nh * hd), "vag.wk": (cfg.s_dim, nh * hd), "vag.wo": (nh, 1),
        "uaoa.w1": (cfg.s_dim, cfg.reduce_dim), "uaoa.b1": (1, cfg.reduce_dim),
        "uaoa.w2": (cfg.reduce_dim, e), "uaoa.b2": (1, e),
        "img.w1": (cfg.d_img, cfg.reduce_dim), "img.w2": (cfg.reduce_dim, e),
        "pe.pi": (m, e), "pe.row": (side, e), "pe.col": (side, e), "pe.rel": (nh, (2 * side - 1) ** 2),
        "uaia.wq": (e, nh * hd), "uaia.wk": (e, nh * hd), "uaia.wv": (e, nh * hd), "uaia.wo": (nh * hd, e),
        "abed.r": (1, 3), "abed.tokens": (3, e),
        "pa": (NUM_ACTIONS + 1, e),
        "pool.w": (n * e, e), "pool.b": (1, e),
        "fpw": (3 * e, cfg.lstm_input),
        "lstm.w_x": (cfg.lstm_input, 4 * hid), "lstm.w_h": (hid, 4 * hid), "lstm.b": (1, 4 * hid),
        "actor.w": (hid, NUM_ACTIONS), "actor.b": (1, NUM_ACTIONS),
        "critic.w": (hid, 1), "critic.b": (1, 1),
        "gcn.wa": (6, hd), "gcn.wg": (cfg.s_dim, e),
    }


class ModelParams:
    """Named learnable tensors plus the config that fixes their shapes."""

    def __init__(self, cfg: ModelConfig, tensors: dict):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def names(self) -> list:
        return list(self.tensors)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        cfg.validate()
        out = {}
        for name, shape in param_shapes(cfg).items():
            if name == "gn" or name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
                data = np.zeros(shape)
            elif name == "w_n":
                data = np.full(shape, 0.95)
            elif name == "w_v":
                data = np.full(shape, 0.05)
            elif name == "vag.wo":
                data = np.full(shape, 1.0 / cfg.n_heads)
            elif name == "abed.r":
                data = np.ones(shape)
            elif name in ("abed.tokens", "pe.rel"):
                data = np.zeros(shape)
            elif name.startswith("pe.") or name == "pa":
                data = rng.normal(0.0, 0.1, shape)
            elif name == "actor.w":
                data = rng.normal(0.0, 0.01, shape)
            else:
                lim = math.sqrt(6.0 / (shape[0] + shape[1]))
                data = rng.uniform(-lim, lim, shape)
            out[name] = ad.parameter(data)
        return cls(cfg, out)

    def zero_grad(self) -> None:
        for t in self:
            t.zero_grad()

    def grads(self) -> dict:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in self.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: ad.parameter(t.data.copy()) for k, t in self.items()})

    def load_values(self, other: "ModelParams") -> None:
        for k, t in self.items():
            t.data[...] = other[k].data

    # -- checkpoint -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "model_config": self.cfg.to_dict(),
            "params": {k: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for k, t in self.items()},
        }

    @classmethod
    def from_dict(cls, d: dict, expect: ModelConfig | None = None) -> "ModelParams":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {d.get('format')!r}")
        cfg = ModelConfig.from_dict(d["model_config"])
        shapes = param_shapes(cfg if expect is None else expect)
        if expect is not None:
            theirs = param_shapes(cfg)
            bad = sorted(k for k in shapes if theirs.get(k) != shapes[k])
            if bad:
                raise CheckpointError(f"checkpoint incompatible with config; mismatched parameters: {bad}")
            cfg = expect
        tensors = {}
        for name, shape in shapes.items():
            if name not in d["params"]:
                raise CheckpointError(f"checkpoint missing parameter {name}")
            rec = d["params"][name]
            if tuple(rec["shape"]) != tuple(shape) or len(rec["data"]) != int(np.prod(shape)):
                raise CheckpointError(f"parameter {name}: shape {rec['shape']} does not match {list(shape)}")
            tensors[name] = ad.parameter(np.array(rec["data"], dtype=np.float64).reshape(shape))
        return cls(cfg, tensors)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path, expect: ModelConfig | None = None) -> "ModelParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), expect)


class AttentionVector(NamedTuple):
    values: np.ndarray  # N
    mask: np.ndarray  # N bool


class PolicyOutput(NamedTuple):
    logits: Tensor  # 1 x 6
    value: Tensor  # 1 x 1
    attention: AttentionVector
    hidden: tuple
    target_conf: float


# -- components ---------------------------------------------------------------
def object_index_embedding(params: ModelParams) -> Tensor:
    """Two dense layers over one-hot class indices; one-hot @ W1 is W1 itself."""
    h = ad.relu(ad.add(params["oi.w1"], params["oi.b1"]))
    return ad.add(ad.matmul(h, params["oi.w2"]), params["oi.b2"])


def intrinsic_logits(gn: Tensor, undirected: bool = False) -> Tensor:
    if undirected:
        return ad.mul(ad.add(gn, ad.transpose(gn)), 0.5)
    return gn


def normalized_intrinsic(gn: Tensor, undirected: bool = False) -> Tensor:
    return ad.softmax_rows(intrinsic_logits(gn, undirected))


def intrinsic_attention(gn: Tensor, p: int, undirected: bool = False, normalized: Tensor | None = None) -> Tensor:
    """Weights of all edges ending at target ``p`` as an ``N x 1`` column."""
    n = gn.shape[0]
    if not 0 <= p < n:
        raise IndexError(f"target {p} out of range for {n} classes")
    probs = normalized if normalized is not None else normalized_intrinsic(gn, undirected)
    return ad.transpose(probs[p:p + 1])


def image_query(image: Tensor, oi: Tensor, p: int) -> Tensor:
    return ad.concat([ad.mean_pool_rows(image), oi[p:p + 1]], axis=1)


def confidence_filter(s: np.ndarray, threshold: float):
    """Rows with ``conf > threshold`` survive; the rest are zeroed in the copy."""
    mask = s[:, -2] > threshold
    return np.where(mask[:, None], s, 0.0), mask


def _split_heads(x: Tensor, nh: int, hd: int) -> Tensor:
    """``R x (nh*hd)`` -> ``nh x R x hd``."""
    r = x.shape[0]
    return ad.transpose(ad.reshape(x, (r, nh, hd)), (1, 0, 2))


def view_adaptive_graph(query: Tensor, s: Tensor, mask: np.ndarray, params: ModelParams,
                        train: bool = False, rng=None, return_heads: bool = False):
    """Multi-head scores of the image query against surviving objects -> ``N x 1``."""
    cfg = params.cfg
    nh, hd, n = cfg.n_heads, cfg.head_dim, s.shape[0]
    if not np.any(mask):
        zero = Tensor(np.zeros((n, 1)))
        return (zero, np.zeros((nh, n))) if return_heads else zero
    q = _split_heads(ad.matmul(query, params["vag.wq"]), nh, hd)  # nh x 1 x hd
    k = _split_heads(ad.matmul(s, params["vag.wk"]), nh, hd)  # nh x N x hd
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(hd))  # nh x 1 x N
    heads = ad.softmax_rows(scores, mask=mask[None, None, :])
    heads_probs = heads.data.reshape(nh, n)
    heads = ad.dropout(heads, cfg.dropout_rate, rng, train)
    g_v = ad.matmul(ad.transpose(ad.reshape(heads, (nh, n))), params["vag.wo"])  # N x 1
    return (g_v, heads_probs) if return_heads else g_v


def object_attention(g_intrinsic, g_view, w_n, w_v) -> Tensor:
    return ad.add(ad.mul(g_intrinsic, w_n), ad.mul(g_view, w_v))


def reduce_objects(s: Tensor, params: ModelParams) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(s, params["uaoa.w1"]), params["uaoa.b1"]))
    return ad.add(ad.matmul(h, params["uaoa.w2"]), params["uaoa.b2"])


def uaoa(s: Tensor, g_t: Tensor, params: ModelParams, enabled: bool = True) -> Tensor:
    reduced = reduce_objects(s, params)
    return ad.scale(reduced, g_t) if enabled else reduced


def object_semantics(g_t: Tensor, oi: Tensor, mask: np.ndarray) -> Tensor:
    weights = ad.mul(g_t, mask.astype(np.float64)[:, None])
    return ad.matmul(ad.transpose(weights), oi)  # 1 x E


def position_embedding(params: ModelParams, mode: str):
    cfg = params.cfg
    if mode == "1d":
        return params["pe.pi"]
    if mode == "2d":
        side = math.isqrt(cfg.m_cells)
        rows = np.repeat(np.arange(side), side)
        cols = np.tile(np.arange(side), side)
        return ad.add(params["pe.row"][rows], params["pe.col"][cols])
    if mode in ("none", "relative"):
        return None
    raise ValueError(f"unknown pixel embedding mode {mode!r}")


def position_aware_image(image: Tensor, params: ModelParams, mode: str | None = None) -> Tensor:
    mode = params.cfg.pixel_embed if mode is None else mode
    cfg = params.cfg
    if image.shape != (cfg.m_cells, cfg.d_img):
        raise ValueError(f"image shape {image.shape} != {(cfg.m_cells, cfg.d_img)}")
    feats = ad.relu(ad.matmul(ad.relu(ad.matmul(image, params["img.w1"])), params["img.w2"]))
    pe = position_embedding(params, mode)
    return feats if pe is None else ad.add(feats, pe)


def relative_offsets(m: int) -> np.ndarray:
    """Index into the ``(2s-1)^2`` offset table of each pixel relative to the view centre."""
    side = math.isqrt(m)
    c = side // 2
    r, q = np.divmod(np.arange(m), side)
    return (r - c + side - 1) * (2 * side - 1) + (q - c + side - 1)


def uaia(d: Tensor, image_feats: Tensor, params: ModelParams, train: bool = False, rng=None,
         return_weights: bool = False):
    """Single-query multi-head attention from object semantics over image cells -> ``1 x E``."""
    cfg = params.cfg
    nh, hd, m = cfg.n_heads, cfg.head_dim, image_feats.shape[0]
    q = _split_heads(ad.matmul(d, params["uaia.wq"]), nh, hd)  # nh x 1 x hd
    k = _split_heads(ad.matmul(image_feats, params["uaia.wk"]), nh, hd)  # nh x M x hd
    v = _split_heads(ad.matmul(image_feats, params["uaia.wv"]), nh, hd)  # nh x M x hd
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(hd))  # nh x 1 x M
    if cfg.pixel_embed == "relative":
        bias = params["pe.rel"][:, relative_offsets(m)]  # nh x M
        scores = ad.add(scores, ad.reshape(bias, (nh, 1, m)))
    weights = ad.softmax_rows(scores)
    probs = weights.data.reshape(nh, m)
    weights = ad.dropout(weights, cfg.dropout_rate, rng, train)
    heads = ad.matmul(weights, v)  # nh x 1 x hd
    out = ad.matmul(ad.reshape(heads, (1, nh * hd)), params["uaia.wo"])
    return (out, probs) if return_weights else out


def abed_fuse(s_hat: Tensor, i_hat: Tensor, pa_index: int, params: ModelParams, mode: str | None = None) -> Tensor:
    cfg = params.cfg
    mode = cfg.branch_mode if mode is None else mode
    if not 0 <= pa_index <= START_ACTION:
        raise IndexError(f"previous action index {pa_index} out of range")
    obj = ad.add(ad.matmul(ad.reshape(s_hat, (1, -1)), params["pool.w"]), params["pool.b"])
    pa = params["pa"][pa_index:pa_index + 1]
    branches = [obj, i_hat, pa]
    if mode == "ed":
        r = params["abed.r"]
        branches = [ad.mul(b, r[:, i:i + 1]) for i, b in enumerate(branches)]
    elif mode == "bs":
        tok = params["abed.tokens"]
        branches = [ad.add(b, tok[i:i + 1]) for i, b in enumerate(branches)]
    elif mode != "none":
        raise ValueError(f"unknown branch mode {mode!r}")
    return ad.matmul(ad.concat(branches, axis=1), params["fpw"])


def policy_step(h_in: Tensor, hidden, params: ModelParams):
    lstm = {"w_x": params["lstm.w_x"], "w_h": params["lstm.w_h"], "b": params["lstm.b"]}
    h, c = ad.lstm_step(lstm, h_in, hidden[0], hidden[1])
    logits = ad.add(ad.matmul(h, params["actor.w"]), params["actor.b"])
    value = ad.add(ad.matmul(h, params["critic.w"]), params["critic.b"])
    return logits, value, (h, c)


def done_reminder(logits: np.ndarray, target_conf: float, threshold: float = 0.6, boost: float = 2.0) -> np.ndarray:
    """Raise the Done logit by ``boost * target_conf`` once the target is confidently detected."""
    out = np.array(logits, dtype=np.float64, copy=True)
    if target_conf >= threshold:
        out[..., DONE] += boost * target_conf
    return out


def gcn_baseline(s: Tensor, params: ModelParams):
    """Object GCN whose adjacency comes only from box, confidence and target columns.

    Returns the aggregated ``N x E`` features and the adjacency matrix.
    """
    d_vis = params.cfg.d_vis
    rel = s[:, d_vis:d_vis + 6]
    z = ad.matmul(rel, params["gcn.wa"])
    adj = ad.softmax_rows(ad.matmul(z, ad.transpose(z)))
    feats = ad.relu(ad.matmul(s, params["gcn.wg"]))
    return ad.matmul(adj, feats), adj


# -- full forward ---------------------------------------------------------------
class StaticParts(NamedTuple):
    oi: Tensor
    intrinsic: Tensor


def static_parts(params: ModelParams) -> StaticParts:
    """Observation-independent nodes; build once per graph and reuse across steps."""
    cfg = params.cfg
    return StaticParts(object_index_embedding(params), normalized_intrinsic(params["gn"], cfg.undirected_doa))


def initial_hidden(cfg: ModelConfig):
    z = np.zeros((1, cfg.lstm_hidden))
    return Tensor(z), Tensor(z.copy())


def forward(obs: Observation, target: int, pa_index: int, hidden, params: ModelParams,
            train: bool = False, rng: np.random.Generator | None = None,
            static: StaticParts | None = None) -> PolicyOutput:
    cfg = params.cfg
    if train and rng is None:
        raise ValueError("training forward pass needs an rng for dropout")
    static = static or static_parts(params)
    image = Tensor(obs.image)
    s_np = obs.detections
    s = Tensor(s_np)
    conf = s_np[:, -2]
    mask = conf > cfg.conf_threshold if cfg.use_cf else conf > 0.0
    n = cfg.n_classes

    need_attention = cfg.use_uaoa or cfg.use_uaia or not cfg.use_gcn_baseline
    g_t = None
    if need_attention:
        parts = []
        if cfg.use_ig:
            g_int = intrinsic_attention(params["gn"], target, normalized=static.intrinsic)
            parts.append(ad.mul(g_int, params["w_n"]))
        if cfg.use_vag:
            query = image_query(image, static.oi, target)
            g_v = view_adaptive_graph(query, s, mask, params, train, rng)
            parts.append(ad.mul(g_v, params["w_v"]))
        g_t = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1]) if parts else Tensor(np.zeros((n, 1)))

    if cfg.use_gcn_baseline:
        s_hat, adj = gcn_baseline(s, params)
        logged = adj.data.mean(axis=0)
    else:
        s_hat = uaoa(s, g_t, params, cfg.use_uaoa)
        logged = g_t.data[:, 0].copy()

    feats = position_aware_image(image, params)
    if cfg.use_uaia:
        i_hat = uaia(object_semantics(g_t, static.oi, mask), feats, params, train, rng)
    else:
        i_hat = ad.mean_pool_rows(feats)
    i_hat = ad.dropout(i_hat, cfg.dropout_rate, rng, train)

    h_in = abed_fuse(s_hat, i_hat, pa_index, params)
    logits, value, hidden = policy_step(h_in, hidden, params)
    return PolicyOutput(logits, value, AttentionVector(logged, mask), hidden, float(conf[target]))


def action_logits(out: PolicyOutput, cfg: ModelConfig) -> np.ndarray:
    """Logits used for action selection (done reminder applied when enabled)."""
    raw = out.logits.data[0]
    if cfg.done_reminder:
        return done_reminder(raw, out.target_conf, cfg.conf_threshold, cfg.done_boost)
    return raw.copy()
