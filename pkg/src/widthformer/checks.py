"""Named invariant checks runnable from the CLI (``widthformer check``)."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import encoding, numeric
from .aux_head import (
    AuxHeadParams, WidthTarget, aux_backward, aux_forward, aux_forward_cached, aux_loss, aux_loss_and_grad,
    train_aux_head,
)
from .bench import loglog_slope
from .decoder import (
    DecoderParams, key_count, transform, transform_backward, transform_forward, transform_full_forward,
)
from .geometry import (
    CameraModel, CameraRig, DepthBins, PerturbSpec, lift_pixel, perturb_rig, project_to_ego, reference_points, to_polar,
)
from .model import ModelConfig, WidthFormer, pipeline_loss_and_grads, removability_check
from .numeric import (
    LayerNorm, Linear, Mlp, MultiHeadAttention, grad_check, grad_check_params, make_rng,
)
from .scene import toy_scene
from .sweep import run_sweep
from .width import RefineParams, height_maxpool, refine, refine_backward, refine_cost, refine_forward

GRAD_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


_REGISTRY: dict[str, Callable[[], tuple[bool, str]]] = {}


def check(name: str):
    def register(fn):
        _REGISTRY[name] = fn
        return fn
    return register


def names() -> list[str]:
    return list(_REGISTRY)


def run_checks(pattern: str = "*") -> list[CheckResult]:
    """Run every registered check whose name matches the glob; failures never stop the run."""
    results = []
    for name, fn in _REGISTRY.items():
        if not fnmatch.fnmatchcase(name, pattern):
            continue
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail))
    return results


def _toy():
    rig, feat = toy_scene()
    return WidthFormer.init(ModelConfig.toy(), seed=0), rig, feat


# --- numeric ---------------------------------------------------------------

@check("softmax.sums_to_one")
def _softmax_sums():
    x = make_rng(11).uniform(-1e6, 1e6, size=(64, 17))
    err = max(np.max(np.abs(numeric.softmax(x, axis=a).sum(axis=a) - 1)) for a in (0, 1))
    return err <= 1e-9, f"max |sum - 1| = {err:.2e}"


@check("normalization.attention_rows")
def _attention_rows():
    rng = make_rng(12)
    attn = MultiHeadAttention.init(rng, 8, 2)
    _, cache = attn.forward(rng.normal(size=(5, 8)), rng.normal(size=(7, 8)), rng.normal(size=(7, 8)))
    err = np.max(np.abs(cache[7].sum(axis=-1) - 1))
    return err <= 1e-9, f"max |row sum - 1| = {err:.2e}"


@check("mha.uniform_attention_mean")
def _mha_uniform():
    rng = make_rng(13)
    key = np.tile(rng.normal(size=(1, 8)), (6, 1))
    value = rng.normal(size=(6, 8))
    out = MultiHeadAttention.identity(8, 2)(rng.normal(size=(3, 8)), key, value)
    err = np.max(np.abs(out - value.mean(axis=0)))
    return err <= 1e-12, f"max deviation from value mean = {err:.2e}"


@check("matmul.associativity")
def _matmul_assoc():
    rng = make_rng(14)
    worst = 0.0
    for _ in range(10):
        m, k, n, p = rng.integers(1, 17, size=4)
        a, b, c = rng.normal(size=(m, k)), rng.normal(size=(k, n)), rng.normal(size=(n, p))
        lhs = numeric.matmul(numeric.matmul(a, b), c)
        rhs = numeric.matmul(a, numeric.matmul(b, c))
        worst = max(worst, np.max(np.abs(lhs - rhs)))
    return worst <= 1e-9, f"max |(AB)C - A(BC)| = {worst:.2e}"


@check("rng.reproducible")
def _rng():
    a = make_rng(7, 3).random(1000)
    b = make_rng(7, 3).random(1000)
    c = make_rng(7, 4).random(1000)
    return a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes(), "same key identical, other stream differs"


def block_grad_errors(seed: int = 0) -> dict[str, float]:
    """Worst finite-difference error per parameterized block at toy dims (C=8, 2 heads)."""
    rng = make_rng(seed, 99)
    errors = {}

    def record(name, loss, params, grads, x=None, dx=None, fx=None):
        worst = max(grad_check_params(loss, params, grads).values())
        if x is not None:
            worst = max(worst, grad_check(fx, x, dx))
        errors[name] = worst

    x = rng.normal(size=(5, 8))
    r = rng.normal(size=(5, 6))
    lin = Linear.init(rng, 8, 6)
    y, c = lin.forward(x)
    dx, g = lin.backward(r, c)
    record("linear", lambda: float(np.sum(r * lin(x))), lin, g, x, dx, lambda v: float(np.sum(r * lin(v))))

    mlp = Mlp.init(rng, [8, 12, 6])
    y, c = mlp.forward(x)
    dx, g = mlp.backward(r, c)
    record("mlp", lambda: float(np.sum(r * mlp(x))), mlp, g, x, dx, lambda v: float(np.sum(r * mlp(v))))

    ln = LayerNorm(rng.normal(size=8), rng.normal(size=8))
    r8 = rng.normal(size=(5, 8))
    y, c = ln.forward(x)
    dx, g = ln.backward(r8, c)
    record("layer_norm", lambda: float(np.sum(r8 * ln(x))), ln, g, x, dx, lambda v: float(np.sum(r8 * ln(v))))

    attn = MultiHeadAttention.init(rng, 8, 2)
    kv = rng.normal(size=(7, 8))
    y, c = attn.forward(x, kv, kv)
    dq, dk, dv, g = attn.backward(r8, c)
    record("mha", lambda: float(np.sum(r8 * attn(x, kv, kv))), attn, g, kv, dk + dv,
           lambda v: float(np.sum(r8 * attn(x, v, v))))

    model, rig, feat = _toy()
    width = height_maxpool(feat)
    ref = RefineParams.init(rng, 8, 2)
    rw = rng.normal(size=width.shape)
    stages, c = refine_forward(width, feat, ref)
    dw, df, g = refine_backward(rw, c, ref)
    record("refine", lambda: float(np.sum(rw * refine(width, feat, ref))), ref, g, feat, df,
           lambda v: float(np.sum(rw * refine(width, v, ref))))

    pe = rng.normal(size=width.shape)
    q = rng.normal(size=(3, 3, 8))
    rq = rng.normal(size=q.shape)
    for norm in (True, False):
        dec = DecoderParams.init(rng, 8, 2, use_norm=norm)
        out, c = transform_forward(width, pe, q, dec)
        dwid, dpe, dqq, g = transform_backward(rq, c, width.shape, dec)
        record(f"decoder{'' if norm else '_no_norm'}", lambda dec=dec: float(np.sum(rq * transform(width, pe, q, dec))),
               dec, g, width, dwid, lambda v, dec=dec: float(np.sum(rq * transform(v, pe, q, dec))))

    head = AuxHeadParams.init(rng, 8, 2, 3, 4)
    targets = [WidthTarget(0, (1, 2), 1, 2, 0), WidthTarget(1, (3, 5), 2, 0, 1)]
    logits, c = aux_forward_cached(width, head)
    _, dlogits = aux_loss_and_grad(logits, targets)
    dw, g = aux_backward(dlogits, c, head)
    record("aux_head", lambda: aux_loss(aux_forward(width, head), targets).total, head, g, width, dw,
           lambda v: aux_loss(aux_forward(v, head), targets).total)

    rb = rng.normal(size=(3, 3, 8))
    _, dfeat, g = pipeline_loss_and_grads(model.detached(), rig, feat, rb)
    record("width_pipeline", lambda: float(np.sum(rb * model(rig, feat))), model.detached(), g, feat, dfeat,
           lambda v: float(np.sum(rb * model(rig, v))))
    return errors


@check("gradcheck.all_blocks")
def _grad_blocks():
    errors = block_grad_errors()
    worst = max(errors, key=errors.get)
    return errors[worst] <= GRAD_TOL, f"worst {worst} = {errors[worst]:.2e}"


# --- geometry --------------------------------------------------------------

@check("lift.roundtrip")
def _lift_roundtrip():
    rig, _ = toy_scene()
    rng = make_rng(21)
    worst = 0.0
    for cam in rig.cameras:
        for _ in range(20):
            u, v = rng.uniform(0, 6), rng.uniform(0, 4)
            depth = rng.uniform(1, 60)
            truth = project_to_ego(np.array([u * depth, v * depth, depth]), cam)
            cam_pt = np.linalg.solve(cam.rotation, truth - cam.translation)
            pix = cam.intrinsics @ cam_pt
            lifted = project_to_ego(lift_pixel(pix[0] / pix[2], pix[1] / pix[2], DepthBins([pix[2]]))[0], cam)
            worst = max(worst, np.max(np.abs(lifted - truth)))
    return worst <= 1e-9, f"max round-trip error = {worst:.2e} m"


@check("polar.reconstruct")
def _polar_reconstruct():
    p = make_rng(22).uniform(-60, 60, size=(500, 3))
    pc = to_polar(p)
    back = np.stack([pc.d * pc.cos, pc.d * pc.sin, pc.z], axis=-1)
    err = np.max(np.abs(back - p))
    unit = np.max(np.abs(pc.sin ** 2 + pc.cos ** 2 - 1))
    return err <= 1e-9 and unit <= 1e-9, f"reconstruction {err:.2e}, |sin^2+cos^2-1| {unit:.2e}"


@check("polar.origin_convention")
def _polar_origin():
    pc = to_polar(np.array([0.0, 0.0, 2.0]))
    return (pc.d, pc.sin, pc.cos, pc.z) == (0.0, 0.0, 1.0, 2.0), "origin maps to d=0, sin=0, cos=1"


@check("perturb.zero_sigma_identity")
def _perturb_zero():
    rig, _ = toy_scene()
    ok = True
    for kind in ("rotation", "translation"):
        for axis in "xyz":
            out = perturb_rig(rig, PerturbSpec(axis, kind, 0.0), make_rng(0))
            ok &= all(np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)
                      for a, b in zip(rig.cameras, out.cameras))
    return ok, "sigma=0 leaves every camera untouched"


@check("perturb.rotations_orthonormal")
def _perturb_ortho():
    rig, _ = toy_scene()
    worst = 0.0
    for axis in "xyz":
        out = perturb_rig(rig, PerturbSpec(axis, "rotation", 0.3), make_rng(1))
        for cam in out.cameras:
            worst = max(worst, np.max(np.abs(cam.rotation.T @ cam.rotation - np.eye(3))))
    return worst <= 1e-9, f"max |R^T R - I| = {worst:.2e}"


@check("perturb.height_shift_only_moves_z")
def _perturb_height():
    rig, _ = toy_scene()
    noisy = perturb_rig(rig, PerturbSpec("y", "translation", 0.5), make_rng(2))
    bins = DepthBins.uniform(1, 60, 5)
    ok = True
    for a, b in zip(rig.cameras, noisy.cameras):
        pa, pb = reference_points(a, 4, 6, bins), reference_points(b, 4, 6, bins)
        ok &= np.array_equal(pa[..., :2], pb[..., :2]) and not np.array_equal(pa[..., 2], pb[..., 2])
    return ok, "camera-y translation changes only ego z, bit-exact"


# --- encodings -------------------------------------------------------------

@check("encoding.pixel_shape")
def _pixel_shape():
    model, rig, feat = _toy()
    cfg = model.config
    s = encoding.reference_coefficients(feat, model.coeff_head)
    mlp = Mlp.init(make_rng(31), [cfg.encoder.encode_width(True), 8, 8])
    pe = encoding.pixel_refpe(feat, rig, cfg.bins, s, mlp, True, cfg.encoder)
    return pe.values.shape == feat.shape, f"{pe.values.shape} vs {feat.shape}"


@check("normalization.reference_coefficients")
def _coeff_norm():
    model, rig, feat = _toy()
    s = encoding.reference_coefficients(feat, model.coeff_head)
    err = np.max(np.abs(s.sum(axis=-1) - 1))
    return err <= 1e-6 and np.all(s >= 0), f"max |sum_k s - 1| = {err:.2e}"


@check("normalization.height_distribution")
def _height_norm():
    model, rig, feat = _toy()
    t = encoding.height_distribution(feat, model.height_head)
    err = np.max(np.abs(t.sum(axis=-1) - 1))
    return err <= 1e-6 and np.all(t >= 0), f"max |sum_i t - 1| = {err:.2e}"


@check("encoding.width_ignores_height")
def _width_z():
    model, rig, feat = _toy()
    noisy = perturb_rig(rig, PerturbSpec("y", "translation", 1.0), make_rng(3))
    a = model.encode_width(rig, feat)
    b = model.encode_width(noisy, feat)
    return np.array_equal(a, b), "width encodings bit-identical under a pure-z rig change"


@check("encoding.query_matches_pixel")
def _query_pixel():
    err = query_pixel_gap(make_rng(32), 10)
    return err <= 1e-12, f"max |query_refpe - pixel_refpe| = {err:.2e}"


def query_pixel_gap(rng: np.random.Generator, anchors: int, c: int = 8, bands: int = 4) -> float:
    """Largest gap between the sparse-query encoding of an anchor and the dense encoding of
    a one-pixel camera whose single reference point is that anchor."""
    enc = encoding.FourierEncoder(bands)
    mlp = Mlp.init(rng, [enc.encode_width(True), c, c])
    worst = 0.0
    for _ in range(anchors):
        anchor = rng.uniform(-50, 50, size=3)
        p_hat = np.array([0.5, 0.5, 1.0])
        cam = CameraModel(np.eye(3), np.eye(3), anchor - p_hat)
        rig = CameraRig((cam,))
        feat = np.zeros((1, 1, 1, c))
        pixel = encoding.pixel_refpe(feat, rig, DepthBins([1.0]), np.ones((1, 1, 1, 1)), mlp, True, enc)
        point = reference_points(cam, 1, 1, DepthBins([1.0]))[0, 0, 0]
        query = encoding.query_refpe(point, mlp, enc)
        worst = max(worst, float(np.max(np.abs(pixel.values[0, 0, 0] - query))))
    return worst


@check("encoding.deterministic")
def _enc_det():
    model, rig, feat = _toy()
    return model.encode_width(rig, feat).tobytes() == model.encode_width(rig, feat).tobytes(), "repeat runs match"


# --- width pipeline ----------------------------------------------------------

@check("maxpool.row_duplication")
def _pool_dup():
    feat = make_rng(41).normal(size=(2, 4, 6, 8))
    dup = np.concatenate([feat, feat[:, 2:3]], axis=1)
    return np.array_equal(height_maxpool(feat), height_maxpool(dup)), "duplicated row leaves output unchanged"


@check("maxpool.monotone_commute")
def _pool_monotone():
    feat = make_rng(42).normal(size=(2, 4, 6, 8))
    f = np.tanh
    return np.array_equal(height_maxpool(f(feat)), f(height_maxpool(feat))), "pool(g(x)) == g(pool(x))"


@check("refine.views_independent")
def _refine_views():
    model, rig, feat = _toy()
    width = height_maxpool(feat)
    base = refine(width, feat, model.refine)
    feat2, width2 = feat.copy(), width.copy()
    feat2[1] = 0.0
    width2[1] = 0.0
    other = refine(width2, feat2, model.refine)
    return np.array_equal(base[0], other[0]), "zeroing view 1 leaves view 0 unchanged"


@check("refine.cross_column_locality")
def _refine_locality():
    model, rig, feat = _toy()
    width = height_maxpool(feat)
    base = refine_forward(width, feat, model.refine)[0].after_cross
    feat2 = feat.copy()
    feat2[:, :, 3] += 5.0
    moved = refine_forward(width, feat2, model.refine)[0].after_cross
    others = [j for j in range(feat.shape[2]) if j != 3]
    return (np.array_equal(base[:, others], moved[:, others]) and not np.array_equal(base[:, 3], moved[:, 3]),
            "editing image column 3 only changes width feature 3 after the cross stage")


@check("refine.cost_scaling")
def _refine_scaling():
    sizes = (8, 16, 32, 64)
    self_counts = [refine_cost(w, 16).self_attn for w in sizes]
    cross_counts = [refine_cost(16, h).cross_attn for h in sizes]
    a, b = loglog_slope(sizes, self_counts), loglog_slope(sizes, cross_counts)
    return abs(a - 2) <= 0.1 and abs(b - 1) <= 0.05, f"self slope {a:.3f}, cross slope {b:.3f}"


# --- decoder -----------------------------------------------------------------

@check("decoder.key_ratio")
def _key_ratio():
    model, rig, feat = _toy()
    width = model.width_features(feat)
    pe = model.encode_width(rig, feat)
    q = model.queries()
    pix = np.zeros_like(feat)
    k_w = key_count(transform_forward(width, pe, q, model.decoder)[1])
    k_f = key_count(transform_full_forward(feat, pix, q, model.decoder)[1])
    return k_f == feat.shape[1] * k_w, f"{k_f} full keys vs {k_w} width keys, H_I={feat.shape[1]}"


@check("decoder.key_permutation")
def _key_perm():
    model, rig, feat = _toy()
    width = model.width_features(feat)
    pe = model.encode_width(rig, feat)
    q = model.queries()
    base = transform(width, pe, q, model.decoder)
    perm = make_rng(51).permutation(width.shape[0] * width.shape[1])
    c = width.shape[-1]
    wp = width.reshape(-1, c)[perm].reshape(1, -1, c)
    pp = pe.reshape(-1, c)[perm].reshape(1, -1, c)
    err = np.max(np.abs(transform(wp, pp, q, model.decoder) - base))
    return err <= 1e-12, f"max change under key permutation = {err:.2e}"


@check("decoder.height_shift_invariance")
def _dec_z():
    model, rig, feat = _toy()
    base = model(rig, feat)
    ok = True
    for sigma in (0.01, 0.1, 1.0):
        noisy = perturb_rig(rig, PerturbSpec("y", "translation", sigma), make_rng(52))
        ok &= np.array_equal(model(noisy, feat), base)
    return ok, "F^B bit-identical under pure-z rig shifts"


@check("decoder.deterministic")
def _dec_det():
    rig, feat = toy_scene()
    a = WidthFormer.init(ModelConfig.toy(), seed=3)(rig, feat)
    b = WidthFormer.init(ModelConfig.toy(), seed=3)(rig, feat)
    return a.tobytes() == b.tobytes(), "identical seeds give identical F^B bytes"


# --- auxiliary head ----------------------------------------------------------

def toy_targets() -> list[WidthTarget]:
    return [WidthTarget(0, (1, 2), 1, 2, 0), WidthTarget(1, (3, 5), 2, 0, 1), WidthTarget(1, (0, 0), 0, 3, 1)]


@check("aux.loss_nonnegative")
def _aux_nonneg():
    model, rig, feat = _toy()
    width = model.width_features(feat)
    loss = aux_loss(aux_forward(width, model.aux), toy_targets())
    return min(loss) >= 0, f"loss {loss.total:.4f}"


@check("aux.removable")
def _aux_removable():
    model, rig, feat = _toy()
    before = model.detached()(rig, feat)
    trained, _ = train_aux_head(model.aux, model.width_features(feat), toy_targets(), steps=5)
    after = replace(model, aux=trained)
    return (removability_check(model, rig, feat) and removability_check(after, rig, feat)
            and np.array_equal(after(rig, feat), before)), "F^B unaffected by the head, before and after training"


@check("aux.training_reduces_loss")
def _aux_train():
    model, rig, feat = _toy()
    _, history = train_aux_head(model.aux, model.width_features(feat), toy_targets(), steps=200)
    ratio = history[-1] / history[0]
    return ratio <= 0.5, f"loss {history[0]:.3f} -> {history[-1]:.3f}"


# --- harness -----------------------------------------------------------------

@check("sweep.zero_drift_rows")
def _sweep_zero():
    model, rig, feat = _toy()
    res = run_sweep(model, rig, feat, kinds=("rotation", "translation"), axes=("x", "y", "z"),
                    sigmas=(0.0, 0.1), trials=2)
    zero = [r for r in res.rows if r.sigma == 0.0 or (r.kind == "translation" and r.axis == "y")]
    return all(r.drift_mean == 0.0 for r in zero), f"{len(zero)} rows expected to be exactly 0"
