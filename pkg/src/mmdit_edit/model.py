"""A seeded, untrained MM-DiT velocity network at desk scale.

Three block layouts are supported:

``dual``
    separate image/text weights, one joint attention per block (SD3 style).
``dual_x``
    like ``dual`` but the first ``self_attn_prefix`` blocks also run an
    image-only self-attention before the joint attention (SD3.5-M style).
``single_hybrid``
    ``dual_prefix`` dual blocks followed by single-branch blocks that apply
    one shared set of weights to the concatenated sequence (Flux style).

Every block exposes hook points on the image-token query/key projections and
on the pre-softmax logits; see :class:`HookSet`.
"""

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import attention as attn
from .errors import ConfigError, InjectionError, ShapeError
from .io import matrix_from_bytes, matrix_to_bytes
from .tensor import as_matrix, matmul, row_softmax

VARIANTS = ("dual", "dual_x", "single_hybrid")
PAD_TOKEN = "<pad>"
_MAGIC = b"MMDT"
_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "dual"
    depth: int = 8
    heads: int = 2
    head_dim: int = 8
    image_grid: tuple = (8, 8)
    text_len: int = 16
    concat_order: str = attn.IMAGE_FIRST
    dual_prefix: int = 0
    self_attn_prefix: int = 0
    seed: int = 0
    # SD3-style CLIP+T5 emulation: the text sequence is split into two encoder ranges
    dual_encoder: bool = False
    mlp_ratio: int = 2

    def __post_init__(self):
        object.__setattr__(self, "image_grid", tuple(int(v) for v in self.image_grid))
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.concat_order not in attn.CONCAT_ORDERS:
            raise ConfigError(f"concat_order must be one of {attn.CONCAT_ORDERS}")
        for name in ("depth", "heads", "head_dim", "text_len", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if len(self.image_grid) != 2 or min(self.image_grid) < 1:
            raise ConfigError(f"image_grid must be (h, w) with positive sides, got {self.image_grid}")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if not 0 <= self.dual_prefix <= self.depth:
            raise ConfigError("dual_prefix must lie in [0, depth]")
        if not 0 <= self.self_attn_prefix <= self.depth:
            raise ConfigError("self_attn_prefix must lie in [0, depth]")
        if self.dual_encoder and self.text_len < 2:
            raise ConfigError("dual_encoder needs text_len >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def width(self):
        return self.heads * self.head_dim

    @property
    def n_image(self):
        return self.image_grid[0] * self.image_grid[1]

    @property
    def n_tokens(self):
        return self.n_image + self.text_len

    def block_kind(self, b):
        if self.variant == "single_hybrid" and b >= self.dual_prefix:
            return "single"
        if self.variant == "dual_x" and b < self.self_attn_prefix:
            return "dual_x"
        return "dual"

    def to_dict(self):
        d = asdict(self)
        d["image_grid"] = list(self.image_grid)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------- prompts


@dataclass
class PromptEmbedding:
    text: str
    tokens: list
    embedding: np.ndarray
    word_spans: dict


def _token_id(token, salt, seed):
    h = hashlib.blake2b(f"{salt}\x00{token}".encode(), digest_size=8, key=seed.to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def _token_row(token_id, width):
    return np.random.default_rng(token_id).standard_normal(width)


def encode_prompt(text, cfg):
    """Whitespace-tokenise ``text`` and map every token to a hashed embedding row.

    Sequences are padded/truncated to ``cfg.text_len``.  With ``dual_encoder``
    the prompt is encoded twice into the two halves of the sequence, each half
    using its own hash salt, and every word spans one range per encoder.
    """
    words = text.lower().split()
    if cfg.dual_encoder:
        half = cfg.text_len // 2
        ranges = [("enc0", 0, half), ("enc1", half, cfg.text_len)]
    else:
        ranges = [("enc0", 0, cfg.text_len)]
    tokens = [0] * cfg.text_len
    emb = np.empty((cfg.text_len, cfg.width))
    spans = {}
    for salt, start, stop in ranges:
        pad = _token_id(PAD_TOKEN, salt, cfg.seed)
        for pos in range(start, stop):
            i = pos - start
            if i < len(words):
                tid = _token_id(words[i], salt, cfg.seed)
                spans.setdefault(words[i], []).append((pos, pos + 1))
            else:
                tid = pad
            tokens[pos] = tid
            emb[pos] = _token_row(tid, cfg.width)
    return PromptEmbedding(text=text, tokens=tokens, embedding=emb, word_spans=spans)


# -------------------------------------------------------------- activations


@dataclass
class ProjectionSet:
    """Per-head projections, each shaped ``(heads, n, head_dim)``, before rotary embedding."""

    q_i: np.ndarray
    k_i: np.ndarray
    v_i: np.ndarray
    q_t: np.ndarray
    k_t: np.ndarray
    v_t: np.ndarray


@dataclass
class BlockActivation:
    """What a block exposes to editing and analysis.

    ``logits``/``weights`` are the matrices actually used by the block (after
    any injection); ``own_logits``/``own_weights`` come from the branch's own
    projections.  All four are ``(heads, N, N)`` in concatenation order and are
    only stored for blocks in the capture set.
    """

    block_index: int
    projections: ProjectionSet
    logits: np.ndarray = None
    weights: np.ndarray = None
    own_logits: np.ndarray = None
    own_weights: np.ndarray = None
    injected: str = None


@dataclass
class HookSet:
    """Per-block replacements applied before softmax, plus the capture set.

    Values are either stacked over heads or a ``{head: array}`` dict that
    touches only the listed heads:

    * ``qk[b] = (q_i, k_i)``, each ``(heads, N_i, d)``
    * ``i2i_logits[b]``: ``(heads, N_i, N_i)``
    * ``full_logits[b]``: ``(heads, N, N)`` in concatenation order
    """

    qk: dict = field(default_factory=dict)
    i2i_logits: dict = field(default_factory=dict)
    full_logits: dict = field(default_factory=dict)
    capture: frozenset = frozenset()

    def blocks(self):
        return set(self.qk) | set(self.i2i_logits) | set(self.full_logits) | set(self.capture)


def _per_head(value, shape, heads, block, what):
    """Normalise a hook value to ``{head: array}`` and check shapes."""
    if isinstance(value, dict):
        items = value.items()
    else:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != len(shape) + 1 or value.shape[0] != heads:
            raise InjectionError(f"{what} must have shape {(heads,) + shape}, got {value.shape}", block)
        items = enumerate(value)
    out = {}
    for h, arr in items:
        if not 0 <= h < heads:
            raise InjectionError(f"{what}: no such head", block, h)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != shape:
            raise InjectionError(f"{what} must have shape {shape}, got {arr.shape}", block, h)
        out[h] = arr
    return out


# ------------------------------------------------------------------- model


def layer_norm(x, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def time_embedding(t, width):
    """Sinusoidal embedding of a scalar time in [0, 1]."""
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * t * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)])
    return np.pad(emb, (0, width - emb.size))


def _weight_shapes(cfg):
    w, hid = cfg.width, cfg.width * cfg.mlp_ratio
    shapes = [("in_proj", (w, w))]
    for b in range(cfg.depth):
        kind = cfg.block_kind(b)
        streams = [""] if kind == "single" else ["img.", "txt."]
        if kind == "dual_x":
            shapes += [(f"block{b}.img.sa_qkv", (w, 3 * w)), (f"block{b}.img.sa_out", (w, w))]
        for s in streams:
            shapes += [
                (f"block{b}.{s}qkv", (w, 3 * w)),
                (f"block{b}.{s}out", (w, w)),
                (f"block{b}.{s}ff1", (w, hid)),
                (f"block{b}.{s}ff2", (hid, w)),
            ]
    shapes.append(("out_proj", (w, w)))
    return shapes


def init_weights(cfg):
    """Seeded uniform weights in ``[-1/sqrt(width), 1/sqrt(width)]``, in declaration order."""
    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / math.sqrt(cfg.width)
    return {name: rng.uniform(-bound, bound, size=shape) for name, shape in _weight_shapes(cfg)}


class ToyMMDiT:
    """Velocity network ``v(latent, t, prompt)`` with capture/injection hooks."""

    def __init__(self, cfg=None, weights=None):
        self.cfg = cfg or ModelConfig()
        self.weights = weights if weights is not None else init_weights(self.cfg)
        expected = _weight_shapes(self.cfg)
        if [(k, v.shape) for k, v in self.weights.items()] != expected:
            raise ShapeError("weights do not match the model configuration")
        self.scale = 1.0 / math.sqrt(self.cfg.head_dim)

    # -- helpers

    def _heads(self, x):
        n = x.shape[0]
        return x.reshape(n, self.cfg.heads, self.cfg.head_dim).transpose(1, 0, 2)

    def _merge(self, x):
        return x.transpose(1, 0, 2).reshape(x.shape[1], self.cfg.width)

    def _qkv(self, h, w):
        out = matmul(h, w)
        width = self.cfg.width
        return tuple(self._heads(out[:, j * width : (j + 1) * width]) for j in range(3))

    def encode(self, text):
        return encode_prompt(text, self.cfg)

    # -- attention

    def _self_attention(self, h, prefix):
        q, k, v = self._qkv(h, self.weights[prefix + "sa_qkv"])
        pos = np.arange(h.shape[0])
        q, k = attn.apply_rope(q, pos), attn.apply_rope(k, pos)
        out = matmul(row_softmax(attn.logits(q, k), self.scale), v)
        return matmul(self._merge(out), self.weights[prefix + "sa_out"])

    def _joint_attention(self, block, proj, hooks, capture):
        cfg = self.cfg
        n_i, n_t, order = cfg.n_image, cfg.text_len, cfg.concat_order
        pos = np.arange(n_i + n_t)
        act = BlockActivation(block, proj)

        def rope_logits(q_i, k_i):
            q = attn.apply_rope(attn.concat(q_i, proj.q_t, order), pos)
            k = attn.apply_rope(attn.concat(k_i, proj.k_t, order), pos)
            return attn.logits(q, k)

        own = rope_logits(proj.q_i, proj.k_i)
        used = own
        if block in hooks.qk:
            pair = hooks.qk[block]
            if isinstance(pair, dict):
                q_sub = {h: p[0] for h, p in pair.items()}
                k_sub = {h: p[1] for h, p in pair.items()}
            else:
                q_sub, k_sub = pair
            shape = (n_i, cfg.head_dim)
            q_sub = _per_head(q_sub, shape, cfg.heads, block, "q_i")
            k_sub = _per_head(k_sub, shape, cfg.heads, block, "k_i")
            if set(q_sub) != set(k_sub):
                raise InjectionError("q_i and k_i replacements must cover the same heads", block)
            q_i, k_i = proj.q_i.copy(), proj.k_i.copy()
            for h in q_sub:
                q_i[h], k_i[h] = q_sub[h], k_sub[h]
            used = rope_logits(q_i, k_i)
            act.injected = "qk_proj"
        if block in hooks.i2i_logits:
            sub = _per_head(hooks.i2i_logits[block], (n_i, n_i), cfg.heads, block, "I2I logits")
            used = used.copy()
            sl = attn.image_slice(n_i, n_t, order)
            for h, arr in sub.items():
                used[h, sl, sl] = arr
            act.injected = "i2i_block"
        if block in hooks.full_logits:
            n = n_i + n_t
            sub = _per_head(hooks.full_logits[block], (n, n), cfg.heads, block, "full logits")
            used = used.copy()
            for h, arr in sub.items():
                used[h] = arr
            act.injected = "full_map"

        weights = row_softmax(used, self.scale)
        if capture:
            act.logits, act.weights = used, weights
            act.own_logits = own
            act.own_weights = weights if used is own else row_softmax(own, self.scale)
        v = attn.concat(proj.v_i, proj.v_t, order)
        out_i, out_t = attn.split(matmul(weights, v), n_i, order)
        return self._merge(out_i), self._merge(out_t), act

    # -- blocks

    def block_forward(self, block, image_tokens, text_tokens, t, hooks=None):
        """Run one transformer block; returns ``(image_out, text_out, BlockActivation)``."""
        cfg = self.cfg
        hooks = hooks or HookSet()
        if not 0 <= block < cfg.depth:
            raise InjectionError(f"no block {block} in a depth-{cfg.depth} model", block)
        x_i = np.asarray(image_tokens, dtype=np.float64)
        x_t = np.asarray(text_tokens, dtype=np.float64)
        if x_i.shape != (cfg.n_image, cfg.width) or x_t.shape != (cfg.text_len, cfg.width):
            raise ShapeError(f"block inputs have shapes {x_i.shape}, {x_t.shape}")
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        temb = time_embedding(t, cfg.width)
        w = self.weights
        p = f"block{block}."
        kind = cfg.block_kind(block)
        capture = block in hooks.capture

        if kind == "dual_x":
            x_i = x_i + self._self_attention(layer_norm(x_i) + temb, p + "img.")
        h_i = layer_norm(x_i) + temb
        h_t = layer_norm(x_t) + temb

        if kind == "single":
            order = cfg.concat_order
            q, k, v = self._qkv(attn.concat(h_i, h_t, order), w[p + "qkv"])
            (q_i, q_t), (k_i, k_t), (v_i, v_t) = (attn.split(m, cfg.n_image, order) for m in (q, k, v))
            proj = ProjectionSet(q_i, k_i, v_i, q_t, k_t, v_t)
            o_i, o_t, act = self._joint_attention(block, proj, hooks, capture)
            o = matmul(attn.concat(o_i, o_t, order), w[p + "out"])
            x = attn.concat(x_i, x_t, order) + o
            x = x + matmul(gelu(matmul(layer_norm(x), w[p + "ff1"])), w[p + "ff2"])
            x_i, x_t = attn.split(x, cfg.n_image, order)
            return x_i, x_t, act

        q_i, k_i, v_i = self._qkv(h_i, w[p + "img.qkv"])
        q_t, k_t, v_t = self._qkv(h_t, w[p + "txt.qkv"])
        proj = ProjectionSet(q_i, k_i, v_i, q_t, k_t, v_t)
        o_i, o_t, act = self._joint_attention(block, proj, hooks, capture)
        x_i = x_i + matmul(o_i, w[p + "img.out"])
        x_t = x_t + matmul(o_t, w[p + "txt.out"])
        x_i = x_i + matmul(gelu(matmul(layer_norm(x_i), w[p + "img.ff1"])), w[p + "img.ff2"])
        x_t = x_t + matmul(gelu(matmul(layer_norm(x_t), w[p + "txt.ff1"])), w[p + "txt.ff2"])
        return x_i, x_t, act

    def model_velocity(self, latent, t, prompt, hooks=None):
        """Predicted velocity for ``latent`` (``N_i x width``) at time ``t``.

        Returns ``(velocity, activations)`` with one activation per block.
        """
        cfg = self.cfg
        hooks = hooks or HookSet()
        bad = sorted(b for b in hooks.blocks() if not 0 <= b < cfg.depth)
        if bad:
            raise InjectionError(f"hooks target blocks {bad} outside [0, {cfg.depth})", bad[0])
        latent = as_matrix(latent, "latent")
        if latent.shape != (cfg.n_image, cfg.width):
            raise ShapeError(f"latent must be {(cfg.n_image, cfg.width)}, got {latent.shape}")
        if isinstance(prompt, str):
            prompt = self.encode(prompt)
        x_i = matmul(latent, self.weights["in_proj"])
        x_t = prompt.embedding
        acts = []
        for b in range(cfg.depth):
            x_i, x_t, act = self.block_forward(b, x_i, x_t, t, hooks)
            acts.append(act)
        velocity = matmul(layer_norm(x_i), self.weights["out_proj"])
        return velocity, acts

    def velocity_fn(self, prompt):
        """Return ``f(x, t) -> velocity`` bound to ``prompt`` with no hooks."""
        emb = self.encode(prompt) if isinstance(prompt, str) else prompt

        def f(x, t):
            return self.model_velocity(x, t, emb)[0]

        return f

    # -- checkpoints

    def save(self, path):
        """Write a checkpoint: magic, version, JSON config header, then matrix blobs."""
        header = json.dumps(self.cfg.to_dict(), sort_keys=True).encode()
        parts = [_MAGIC, struct.pack("<II", _VERSION, len(header)), header]
        parts += [matrix_to_bytes(m) for m in self.weights.values()]
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path):
        buf = Path(path).read_bytes()
        if buf[:4] != _MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        offset = 12 + hlen
        cfg = ModelConfig.from_dict(json.loads(buf[12:offset]))
        weights = {}
        for name, shape in _weight_shapes(cfg):
            weights[name], offset = matrix_from_bytes(buf, offset)
            if weights[name].shape != shape:
                raise ShapeError(f"{path}: {name} has shape {weights[name].shape}, expected {shape}")
        if offset != len(buf):
            raise ValueError(f"{path}: trailing bytes after weights")
        return cls(cfg, weights)
