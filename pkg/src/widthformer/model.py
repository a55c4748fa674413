"""The assembled view transformer: pool, refine, encode, decode."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .aux_head import AuxHeadParams, AuxLogits, aux_forward
from .decoder import BevGrid, DecoderParams, make_grid, transform, transform_backward, transform_forward
from .encoding import (
    FourierEncoder, bev_query_pe, height_distribution, reference_coefficients, reference_pe, width_refpe,
)
from .geometry import CameraRig, DepthBins, rig_reference_points, to_polar
from .numeric import Mlp, make_rng, softmax, softmax_backward
from .width import (
    RefineParams, height_maxpool, height_maxpool_backward, refine, refine_backward, refine_forward,
)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    heads: int = 4
    bands: int = 8
    depth_bins: int = 32
    near: float = 1.0
    far: float = 60.0
    bev_h: int = 32
    bev_w: int = 32
    bev_range: float = 51.2
    use_norm: bool = True
    rows: int = 16  # H_I, needed by the auxiliary height branch
    n_classes: int = 4
    distance_scale: float = 60.0
    height_scale: float = 10.0

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Desk-check dims: C=8, 2 heads, 2 bands, 3 depth bins, 3x3 BEV grid."""
        base = dict(channels=8, heads=2, bands=2, depth_bins=3, bev_h=3, bev_w=3, rows=4, n_classes=2)
        base.update(overrides)
        return cls(**base)

    @property
    def encoder(self) -> FourierEncoder:
        return FourierEncoder(self.bands, self.distance_scale, self.height_scale)

    @property
    def bins(self) -> DepthBins:
        return DepthBins.uniform(self.near, self.far, self.depth_bins)


class PipelineOutput(NamedTuple):
    bev: np.ndarray
    width: np.ndarray
    width_pe: np.ndarray
    aux: AuxLogits | None


@dataclass
class WidthFormer:
    config: ModelConfig
    coeff_head: Mlp
    height_head: Mlp
    width_pe_mlp: Mlp
    query_mlp: Mlp
    refine: RefineParams
    decoder: DecoderParams
    aux: AuxHeadParams | None = None
    # test-only miswiring that routes head output into the decoder input
    wire_aux_into_decoder: bool = field(default=False)

    @classmethod
    def init(cls, config: ModelConfig = ModelConfig(), seed: int = 0, with_aux: bool = True) -> "WidthFormer":
        rng = make_rng(seed, stream=1)
        c = config.channels
        enc = config.encoder
        return cls(
            config,
            coeff_head=Mlp.init(rng, [c, c, config.depth_bins]),
            height_head=Mlp.init(rng, [c, c, 1]),
            width_pe_mlp=Mlp.init(rng, [enc.encode_width(False), c, c]),
            query_mlp=Mlp.init(rng, [enc.encode_width(False), c, c]),
            refine=RefineParams.init(rng, c, config.heads),
            decoder=DecoderParams.init(rng, c, config.heads, use_norm=config.use_norm),
            aux=AuxHeadParams.init(rng, c, config.n_classes, config.depth_bins, config.rows) if with_aux else None,
        )

    def detached(self) -> "WidthFormer":
        return replace(self, aux=None)

    @property
    def grid(self) -> BevGrid:
        return make_grid(self.config.bev_h, self.config.bev_w, self.config.bev_range)

    def width_features(self, feat: np.ndarray) -> np.ndarray:
        return refine(height_maxpool(feat), feat, self.refine)

    def encode_width(self, rig: CameraRig, feat: np.ndarray) -> np.ndarray:
        coeffs = reference_coefficients(feat, self.coeff_head)
        heights = height_distribution(feat, self.height_head)
        return width_refpe(feat, rig, self.config.bins, coeffs, heights, self.width_pe_mlp,
                           self.config.encoder).values

    def queries(self) -> np.ndarray:
        return bev_query_pe(self.grid, self.query_mlp, self.config.encoder).values

    def forward(self, rig: CameraRig, feat: np.ndarray, width: np.ndarray | None = None) -> PipelineOutput:
        """Run the whole transformer; ``width`` may carry precomputed refined width features."""
        if width is None:
            width = self.width_features(feat)
        aux = aux_forward(width, self.aux) if self.aux is not None else None
        keys = width
        if self.wire_aux_into_decoder and aux is not None:
            keys = width + aux.cls.mean(axis=-1, keepdims=True)
        pe = self.encode_width(rig, feat)
        bev = transform(keys, pe, self.queries(), self.decoder)
        return PipelineOutput(bev, width, pe, aux)

    def __call__(self, rig: CameraRig, feat: np.ndarray) -> np.ndarray:
        return self.forward(rig, feat).bev


def removability_check(model: WidthFormer, rig: CameraRig, feat: np.ndarray) -> bool:
    """True iff BEV features are bit-identical with the auxiliary head attached and detached."""
    attached = model.forward(rig, feat)
    detached = model.detached().forward(rig, feat)
    return bool(np.array_equal(attached.bev, detached.bev))


def pipeline_loss_and_grads(model: WidthFormer, rig: CameraRig, feat: np.ndarray, weight: np.ndarray):
    """Scalar loss ``sum(weight * F^B)`` with gradients w.r.t. the image features and every
    inference-path parameter (heads, encoding MLPs, refine, decoder).

    Returns ``(loss, dfeat, grads)`` where ``grads`` is a detached :class:`WidthFormer`.
    """
    cfg = model.config
    enc = cfg.encoder
    n, h, w, c = feat.shape

    pooled = height_maxpool(feat)
    stages, c_refine = refine_forward(pooled, feat, model.refine)
    width = stages.out

    coeff_logits, c_coeff = model.coeff_head.forward(feat)
    s = softmax(coeff_logits, axis=-1)
    height_logits, c_height = model.height_head.forward(feat)
    t_hw = softmax(height_logits[..., 0], axis=1)  # (N, H, W)
    points = rig_reference_points(rig, h, w, cfg.bins)
    ref = reference_pe(to_polar(points), False, enc)  # (N, H, W, D, P)
    pixel = (s[..., None, :] @ ref)[..., 0, :]  # (N, H, W, P)
    pre = np.einsum("nhw,nhwp->nwp", t_hw, pixel)
    pe, c_pe = model.width_pe_mlp.forward(pre)

    q_in = reference_pe(to_polar(np.concatenate([model.grid.centers, np.zeros((cfg.bev_h, cfg.bev_w, 1))], -1)),
                        False, enc)
    queries, c_q = model.query_mlp.forward(q_in)
    bev, c_dec = transform_forward(width, pe, queries, model.decoder)
    loss = float(np.sum(weight * bev))

    dwidth, dpe, dq, g_dec = transform_backward(weight, c_dec, width.shape, model.decoder)
    _, g_q = model.query_mlp.backward(dq, c_q)
    dpre, g_pe = model.width_pe_mlp.backward(dpe, c_pe)
    dpixel = np.einsum("nhw,nwp->nhwp", t_hw, dpre)
    dt = np.einsum("nhwp,nwp->nhw", pixel, dpre)
    ds = np.einsum("nhwdp,nhwp->nhwd", ref, dpixel)
    dfeat_c, g_coeff = model.coeff_head.backward(softmax_backward(ds, s, axis=-1), c_coeff)
    dfeat_h, g_height = model.height_head.backward(softmax_backward(dt, t_hw, axis=1)[..., None], c_height)
    dpooled, dfeat_r, g_refine = refine_backward(dwidth, c_refine, model.refine)
    dfeat = dfeat_c + dfeat_h + dfeat_r + height_maxpool_backward(dpooled, feat)

    grads = WidthFormer(cfg, g_coeff, g_height, g_pe, g_q, g_refine, g_dec)
    return loss, dfeat, grads
