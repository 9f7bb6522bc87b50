"""Post-norm transformer encoder/decoder, detection head and box decoding.

Activations are batched as ``(B, n, d_model)``. Positional encodings are
added to queries and keys (never values) inside every attention call.
Key masks are boolean ``(B, m)`` tables with ``True`` for real tokens.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation

CHECKPOINT_VERSION = 1
REF_EPS = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 3
    d_model: int = 64
    heads: int = 4
    d_k: int = 16
    d_v: int = 16
    d_ffn: int = 128
    dropout: float = 0.0

    def __post_init__(self):
        if self.heads <= 0 or self.d_k <= 0 or self.d_v <= 0:
            raise ContractViolation("heads, d_k and d_v must be positive")


@dataclass
class AttentionMap:
    """Per-head attention weights ``(B, H, n, m)``.

    ``query_mask`` (B, n) and ``key_mask`` (B, m) flag real positions.
    """

    weights: np.ndarray
    layer: int
    kind: str
    query_mask: np.ndarray = None
    key_mask: np.ndarray = None


class Module:
    """Parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix=""):
        out = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, ad.Node) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def param(value):
    return ad.Node(value, requires_grad=True)


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = param(uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, d_model, heads, d_k, d_v, rng):
        self.d_model, self.heads, self.d_k, self.d_v = d_model, heads, d_k, d_v
        self.w_q = param(uniform_init(rng, d_model, (d_model, heads * d_k)))
        self.w_k = param(uniform_init(rng, d_model, (d_model, heads * d_k)))
        self.w_v = param(uniform_init(rng, d_model, (d_model, heads * d_v)))
        self.w_o = param(uniform_init(rng, heads * d_v, (heads * d_v, d_model)))

    def __call__(self, q, k, v, pos_q=None, pos_k=None, key_mask=None):
        return attention(q, k, v, pos_q, pos_k, self, key_mask)


def attention(q, k, v, pos_q, pos_k, params, key_mask=None):
    """Multi-head scaled dot-product attention.

    Per head: ``softmax((q+pos_q)Wq ((k+pos_k)Wk)^T / sqrt(d_model)) v Wv``;
    heads are concatenated and projected by ``Wo``. Returns the output and
    the ``(B, H, n, m)`` attention weights.
    """
    q, k, v = ad.as_node(q), ad.as_node(k), ad.as_node(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ContractViolation("attention inputs must be (B, n, d)")
    b, n, d = q.shape
    m = k.shape[1]
    if k.shape[0] != b or v.shape[:2] != k.shape[:2] or d != params.d_model:
        raise ContractViolation(f"incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    h, dk, dv = params.heads, params.d_k, params.d_v
    qi = q if pos_q is None else q + pos_q
    ki = k if pos_k is None else k + pos_k
    qh = ad.matmul(qi, params.w_q).reshape(b, n, h, dk).transpose(0, 2, 1, 3)
    kh = ad.matmul(ki, params.w_k).reshape(b, m, h, dk).transpose(0, 2, 3, 1)
    vh = ad.matmul(v, params.w_v).reshape(b, m, h, dv).transpose(0, 2, 1, 3)
    logits = ad.matmul(qh, kh) * (1.0 / np.sqrt(params.d_model))
    mask = None if key_mask is None else np.asarray(key_mask, bool)[:, None, None, :]
    weights = ad.softmax(logits, axis=-1, mask=mask)
    heads = ad.matmul(weights, vh).transpose(0, 2, 1, 3).reshape(b, n, h * dv)
    return ad.matmul(heads, params.w_o), weights.value


class FFN(Module):
    def __init__(self, d_model, d_ffn, rng):
        self.lin1 = Linear(d_model, d_ffn, rng)
        self.lin2 = Linear(d_ffn, d_model, rng)

    def __call__(self, x):
        return ffn(x, self)


def ffn(x, params):
    """``max(0, x W1 + b1) W2 + b2``."""
    return params.lin2(ad.relu(params.lin1(x)))


class EncoderLayer(Module):
    def __init__(self, cfg, rng):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.d_k, cfg.d_v, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FFN(cfg.d_model, cfg.d_ffn, rng)
        self.norm2 = LayerNorm(cfg.d_model)

    def __call__(self, x, pos, key_mask=None):
        y, w = self.attn(x, x, x, pos, pos, key_mask)
        x = self.norm1(x + y)
        x = self.norm2(x + self.ffn(x))
        return x, w


class DecoderLayer(Module):
    def __init__(self, cfg, rng):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.d_k, cfg.d_v, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.d_k, cfg.d_v, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FFN(cfg.d_model, cfg.d_ffn, rng)
        self.norm3 = LayerNorm(cfg.d_model)

    def __call__(self, tgt, query_pos, memory, mem_pos, mem_mask=None):
        y, ws = self.self_attn(tgt, tgt, tgt, query_pos, query_pos)
        tgt = self.norm1(tgt + y)
        y, wc = self.cross_attn(tgt, memory, memory, query_pos, mem_pos, mem_mask)
        tgt = self.norm2(tgt + y)
        tgt = self.norm3(tgt + self.ffn(tgt))
        return tgt, ws, wc


class Encoder(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.layers)]

    def __call__(self, x, pos, key_mask=None):
        return encoder_forward(self, x, pos, key_mask)


def _batched(x):
    x = ad.as_node(x)
    return x if x.ndim == 3 else x.reshape(1, *x.shape)


def encoder_forward(encoder, x, pos, key_mask=None):
    """Run the encoder stack; returns outputs and one self-attention map per layer."""
    x = _batched(x)
    pos = None if pos is None else np.broadcast_to(pos, x.shape)
    maps = []
    for i, layer in enumerate(encoder.layers):
        x, w = layer(x, pos, key_mask)
        maps.append(AttentionMap(w, i, "self", key_mask, key_mask))
    return x, maps


class Decoder(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.layers)]

    def __call__(self, query_pos, memory, mem_pos, mem_mask=None):
        return decoder_forward(self, query_pos, memory, mem_pos, mem_mask)


def decoder_forward(decoder, query_pos, memory, mem_pos, mem_mask=None):
    """Non-autoregressive decoding of all queries at once.

    The decoder input starts at zero and the learned queries enter as the
    query positional term. Returns outputs and the cross-attention maps.
    """
    memory = _batched(memory)
    b = memory.shape[0]
    query_pos = ad.as_node(query_pos)
    if query_pos.ndim == 2:
        query_pos = query_pos.reshape(1, *query_pos.shape) + np.zeros((b, 1, 1))
    tgt = ad.Node(np.zeros(query_pos.shape))
    mem_pos = None if mem_pos is None else np.broadcast_to(mem_pos, memory.shape)
    maps = []
    for i, layer in enumerate(decoder.layers):
        tgt, _, wc = layer(tgt, query_pos, memory, mem_pos, mem_mask)
        maps.append(AttentionMap(wc, i, "cross", None, mem_mask))
    return tgt, maps


class DetectionHead(Module):
    """Shared per-token network: ``d_model -> (C + 1 logits, 4 box params)``."""

    def __init__(self, d_model, n_classes, rng, hidden=None):
        hidden = hidden or d_model
        self.trunk = Linear(d_model, hidden, rng)
        self.cls = Linear(hidden, n_classes + 1, rng)
        self.box = Linear(hidden, 4, rng)

    def __call__(self, x):
        return detection_head(self, x)


def detection_head(head, x):
    h = ad.relu(head.trunk(x))
    return head.cls(h), head.box(h)


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), REF_EPS, 1.0 - REF_EPS)
    return np.log(p) - np.log1p(-p)


def decode_box_reference(raw, ref):
    """Decode raw box parameters around a reference.

    With a 2-column ``ref`` (a point) the centre is
    ``sigmoid(b + logit(ref))`` and width/height are ``sigmoid`` of their
    parameters. With a 4-column ``ref`` (a box) all four coordinates use
    the logit offset, so zero parameters reproduce the reference box.
    """
    raw = ad.as_node(raw)
    ref = np.asarray(ref, dtype=np.float64)
    if ref.shape[-1] == 2:
        offset = np.concatenate([logit(ref), np.zeros(ref.shape[:-1] + (2,))], axis=-1)
    elif ref.shape[-1] == 4:
        offset = logit(ref)
    else:
        raise ContractViolation("reference must be a point or a box")
    return ad.sigmoid(raw + offset)


def save_checkpoint(path, module, meta=None):
    """Write every named parameter array to an ``.npz`` file."""
    arrays = {f"param/{k}": v.value for k, v in module.named_parameters().items()}
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    for k, v in (meta or {}).items():
        arrays[f"meta/{k}"] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, module):
    """Restore parameters in place; returns the stored metadata."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {version}")
        params = module.named_parameters()
        stored = {k[len("param/"):] for k in data.files if k.startswith("param/")}
        if stored != set(params):
            missing = sorted(set(params) ^ stored)
            raise ContractViolation(f"checkpoint parameters differ: {missing[:5]}")
        for k, p in params.items():
            arr = data[f"param/{k}"]
            if arr.shape != p.shape:
                raise ContractViolation(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.value = arr.astype(np.float64)
        return {k[len("meta/"):]: data[k] for k in data.files if k.startswith("meta/")}
