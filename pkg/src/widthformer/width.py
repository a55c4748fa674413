"""Height pooling of image features and the Refine Transformer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .numeric import LayerNorm, Mlp, MultiHeadAttention, ShapeError, mac_scope


def height_maxpool(feat: np.ndarray) -> np.ndarray:
    """``(N, H, W, C)`` image features -> ``(N, W, C)`` width features."""
    if feat.ndim != 4 or feat.shape[1] < 1:
        raise ShapeError(f"expected (N, H, W, C) features, got {feat.shape}")
    return feat.max(axis=1)


def height_maxpool_backward(dwidth: np.ndarray, feat: np.ndarray) -> np.ndarray:
    # gradient goes to the first maximal row
    idx = feat.argmax(axis=1)
    dfeat = np.zeros_like(feat)
    np.put_along_axis(dfeat, idx[:, None], dwidth[:, None], axis=1)
    return dfeat


@dataclass
class RefineParams:
    self_attn: MultiHeadAttention
    norm_self: LayerNorm
    cross_attn: MultiHeadAttention
    norm_cross: LayerNorm
    ffn: Mlp
    norm_ffn: LayerNorm

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, heads: int, hidden: int | None = None) -> "RefineParams":
        hidden = hidden or 2 * c
        return cls(
            MultiHeadAttention.init(rng, c, heads), LayerNorm.init(c),
            MultiHeadAttention.init(rng, c, heads), LayerNorm.init(c),
            Mlp.init(rng, [c, hidden, c]), LayerNorm.init(c),
        )


def columns(feat: np.ndarray) -> np.ndarray:
    """``(N, H, W, C)`` -> ``(N, W, H, C)``: one key set per image column."""
    return feat.transpose(0, 2, 1, 3)


def cross_attend_columns(queries: np.ndarray, feat: np.ndarray, attn: MultiHeadAttention):
    """Width feature ``j`` of each view attends only to the ``H`` pixels of column ``j``.

    Returns the attention output ``(N, W, C)`` and the backward cache.
    """
    cols = columns(feat)
    out, cache = attn.forward(queries[:, :, None, :], cols, cols)
    return out[:, :, 0, :], cache


class RefineStages(NamedTuple):
    after_self: np.ndarray
    after_cross: np.ndarray
    out: np.ndarray


def refine_forward(width: np.ndarray, feat: np.ndarray, params: RefineParams):
    n, h, w, c = feat.shape
    if width.shape != (n, w, c):
        raise ShapeError(f"width features {width.shape} do not match image features {feat.shape}")
    with mac_scope("self"):
        a_self, c_self = params.self_attn.forward(width, width, width)
    s, c_ns = params.norm_self.forward(width + a_self)
    with mac_scope("cross"):
        a_cross, c_cross = cross_attend_columns(s, feat, params.cross_attn)
    x, c_nc = params.norm_cross.forward(s + a_cross)
    with mac_scope("ffn"):
        f, c_ffn = params.ffn.forward(x)
    out, c_nf = params.norm_ffn.forward(x + f)
    cache = (c_self, c_ns, c_cross, c_nc, c_ffn, c_nf)
    return RefineStages(s, x, out), cache


def refine(width: np.ndarray, feat: np.ndarray, params: RefineParams) -> np.ndarray:
    """Self-attention over each view's columns, per-column cross-attention, FFN.

    Post-norm residual layout; views never exchange information.
    """
    return refine_forward(width, feat, params)[0].out


def refine_backward(dout: np.ndarray, cache, params: RefineParams):
    c_self, c_ns, c_cross, c_nc, c_ffn, c_nf = cache
    dsum, g_nf = params.norm_ffn.backward(dout, c_nf)
    dx_f, g_ffn = params.ffn.backward(dsum, c_ffn)
    dx = dsum + dx_f
    dsum, g_nc = params.norm_cross.backward(dx, c_nc)
    dq, dk, dv, g_cross = params.cross_attn.backward(dsum[:, :, None, :], c_cross)
    ds = dsum + dq[:, :, 0, :]
    dfeat = columns(dk + dv)
    dsum, g_ns = params.norm_self.backward(ds, c_ns)
    dq, dk, dv, g_self = params.self_attn.backward(dsum, c_self)
    dwidth = dsum + dq + dk + dv
    grads = RefineParams(g_self, g_ns, g_cross, g_nc, g_ffn, g_nf)
    return dwidth, dfeat, grads


class RefineCost(NamedTuple):
    """Multiply-accumulate counts of one Refine Transformer call on one view.

    ``self_attn`` and ``cross_attn`` are the score and weighted-sum products
    of the two attention stages; projections and the FFN are reported apart.
    """

    self_attn: int
    cross_attn: int
    self_proj: int
    cross_proj: int
    ffn: int

    @property
    def total(self) -> int:
        return sum(self)


def refine_cost(w: int, h: int, c: int = 64, hidden: int | None = None, views: int = 1) -> RefineCost:
    if w < 1 or h < 1:
        raise ValueError("w and h must be positive")
    hidden = hidden or 2 * c
    return RefineCost(
        self_attn=views * 2 * w * w * c,
        cross_attn=views * 2 * w * h * c,
        self_proj=views * 4 * w * c * c,
        cross_proj=views * (2 * w * c * c + 2 * w * h * c * c),
        ffn=views * 2 * w * c * hidden,
    )


def conv_refine_cost(w: int, h: int, c: int = 64, kernel: int = 3) -> int:
    """MACs of a single kernel x kernel convolution over the (h, w) map, for comparison."""
    return h * w * c * c * kernel * kernel
