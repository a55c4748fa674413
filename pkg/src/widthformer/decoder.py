"""Single-layer BEV decoder: BEV queries cross-attend to width features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoding import EncodingSet
from .numeric import LayerNorm, Mlp, MultiHeadAttention, ShapeError


@dataclass
class BevGrid:
    h_b: int
    w_b: int
    range_m: float
    centers: np.ndarray  # (h_b, w_b, 2) ego (x, y)
    features: np.ndarray | None = field(default=None, repr=False)

    @property
    def spacing(self) -> tuple[float, float]:
        return 2 * self.range_m / self.h_b, 2 * self.range_m / self.w_b


def make_grid(h_b: int, w_b: int, range_m: float = 51.2) -> BevGrid:
    """Cell centers of a ``[-range, range]^2`` square; x follows rows, y follows columns."""
    if h_b < 1 or w_b < 1 or not range_m > 0:
        raise ValueError("grid needs positive cell counts and range")
    xs = (np.arange(h_b) + 0.5) * (2 * range_m / h_b) - range_m
    ys = (np.arange(w_b) + 0.5) * (2 * range_m / w_b) - range_m
    centers = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    return BevGrid(h_b, w_b, range_m, centers)


@dataclass
class DecoderParams:
    attn: MultiHeadAttention
    norm_attn: LayerNorm
    ffn: Mlp
    norm_ffn: LayerNorm
    use_norm: bool = True

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, heads: int = 4, hidden: int | None = None,
             use_norm: bool = True) -> "DecoderParams":
        hidden = hidden or 2 * c
        return cls(MultiHeadAttention.init(rng, c, heads), LayerNorm.init(c),
                   Mlp.init(rng, [c, hidden, c]), LayerNorm.init(c), use_norm)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, EncodingSet) else np.asarray(x, dtype=float)


def decode(queries: np.ndarray, keys: np.ndarray, values: np.ndarray, params: DecoderParams):
    """``U = Q + MHA(Q, K, V)``, ``F = U + FFN(U)`` on flat ``(n, C)`` sets.

    With ``use_norm`` each residual sum is followed by a layer norm.
    """
    u, c_attn = params.attn.forward(queries, keys, values)
    u = queries + u
    c_n1 = c_n2 = None
    if params.use_norm:
        u, c_n1 = params.norm_attn.forward(u)
    f, c_ffn = params.ffn.forward(u)
    out = u + f
    if params.use_norm:
        out, c_n2 = params.norm_ffn.forward(out)
    return out, (c_attn, c_n1, c_ffn, c_n2, keys.shape[0])


def decode_backward(dout: np.ndarray, cache, params: DecoderParams):
    c_attn, c_n1, c_ffn, c_n2, _ = cache
    g_n1 = g_n2 = LayerNorm(np.zeros_like(params.norm_attn.gain), np.zeros_like(params.norm_attn.shift))
    if params.use_norm:
        dout, g_n2 = params.norm_ffn.backward(dout, c_n2)
    du_f, g_ffn = params.ffn.backward(dout, c_ffn)
    du = dout + du_f
    if params.use_norm:
        du, g_n1 = params.norm_attn.backward(du, c_n1)
    dq, dk, dv, g_attn = params.attn.backward(du, c_attn)
    grads = DecoderParams(g_attn, g_n1, g_ffn, g_n2, params.use_norm)
    return du + dq, dk, dv, grads


def transform_forward(width, width_pe, bev_q, params: DecoderParams):
    width = np.asarray(width, dtype=float)
    pe = _values(width_pe)
    q = _values(bev_q)
    if width.ndim != 3 or pe.shape != width.shape:
        raise ShapeError(f"width features {width.shape} and encodings {pe.shape} must match (N, W, C)")
    c = width.shape[-1]
    if q.shape[-1] != c:
        raise ShapeError(f"query channels {q.shape[-1]} != feature channels {c}")
    flat_v = width.reshape(-1, c)
    out, cache = decode(q.reshape(-1, c), (width + pe).reshape(-1, c), flat_v, params)
    return out.reshape(q.shape), cache


def transform(width, width_pe, bev_q, params: DecoderParams) -> np.ndarray:
    """BEV features ``(H_B, W_B, C)`` from all ``N_c * W_I`` width features as one key pool."""
    return transform_forward(width, width_pe, bev_q, params)[0]


def transform_backward(dout: np.ndarray, cache, width_shape, params: DecoderParams):
    """Gradients w.r.t. width features, width encodings, BEV queries, and parameters."""
    dq, dk, dv, grads = decode_backward(dout.reshape(-1, dout.shape[-1]), cache, params)
    dk = dk.reshape(width_shape)
    return dk + dv.reshape(width_shape), dk, dq.reshape(dout.shape), grads


def transform_full_oracle(feat, pixel_pe, bev_q, params: DecoderParams) -> np.ndarray:
    """Same decoder with every image pixel as a key: ``N_c * H_I * W_I`` keys."""
    return transform_full_forward(feat, pixel_pe, bev_q, params)[0]


def transform_full_forward(feat, pixel_pe, bev_q, params: DecoderParams):
    feat = np.asarray(feat, dtype=float)
    pe = _values(pixel_pe)
    q = _values(bev_q)
    if feat.ndim != 4 or pe.shape != feat.shape:
        raise ShapeError(f"features {feat.shape} and pixel encodings {pe.shape} must match (N, H, W, C)")
    c = feat.shape[-1]
    if q.shape[-1] != c:
        raise ShapeError(f"query channels {q.shape[-1]} != feature channels {c}")
    out, cache = decode(q.reshape(-1, c), (feat + pe).reshape(-1, c), feat.reshape(-1, c), params)
    return out.reshape(q.shape), cache


def key_count(cache) -> int:
    return cache[-1]


def decoder_cost(n_queries: int, n_keys: int, c: int, hidden: int | None = None) -> dict[str, int]:
    hidden = hidden or 2 * c
    return {
        "proj": 2 * n_queries * c * c + 2 * n_keys * c * c + 2 * n_queries * c * hidden,
        "attn": 2 * n_queries * n_keys * c,
    }
