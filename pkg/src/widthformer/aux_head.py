"""Training-only 1D detection head over width features.

Three per-column branches: class (object classes plus a trailing background
logit), categorical depth over the D bins, and categorical image-row height.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .numeric import ShapeError, arrays, log_softmax, relu, softmax, tally, tree_copy, uniform_init


@dataclass
class Conv1d:
    """Same-padded convolution along the width axis of ``(N, W, C)`` inputs."""

    weight: np.ndarray  # (out, kernel, in)
    bias: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, kernel: int = 3) -> "Conv1d":
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        fan_in = n_in * kernel
        return cls(uniform_init(rng, fan_in, (n_out, kernel, n_in)), uniform_init(rng, fan_in, (n_out,)))

    @property
    def kernel(self) -> int:
        return self.weight.shape[1]

    def _windows(self, x: np.ndarray) -> np.ndarray:
        k = self.kernel
        pad = k // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        w = x.shape[1]
        return np.stack([xp[:, i:i + w] for i in range(k)], axis=2)  # (N, W, k, C)

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.weight.shape[2]:
            raise ShapeError(f"conv expects {self.weight.shape[2]} channels, got {x.shape[-1]}")
        win = self._windows(x)
        tally("proj", x.shape[0] * x.shape[1] * self.weight.size)
        return np.einsum("nwkc,okc->nwo", win, self.weight) + self.bias, win

    def backward(self, dy: np.ndarray, win: np.ndarray):
        grads = Conv1d(np.einsum("nwo,nwkc->okc", dy, win), dy.sum(axis=(0, 1)))
        dwin = np.einsum("nwo,okc->nwkc", dy, self.weight)
        k = self.kernel
        pad = k // 2
        w = dy.shape[1]
        dxp = np.zeros((dy.shape[0], w + 2 * pad, self.weight.shape[2]))
        for i in range(k):
            dxp[:, i:i + w] += dwin[:, :, i]
        return dxp[:, pad:pad + w], grads


@dataclass
class AuxHeadParams:
    trunk: list[Conv1d]
    cls: Conv1d
    depth: Conv1d
    height: Conv1d

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, n_classes: int, depth_bins: int, rows: int,
             hidden: int | None = None, layers: int = 2, kernel: int = 3) -> "AuxHeadParams":
        hidden = hidden or c
        dims = [c] + [hidden] * layers
        trunk = [Conv1d.init(rng, a, b, kernel) for a, b in zip(dims, dims[1:])]
        return cls(
            trunk,
            Conv1d.init(rng, dims[-1], n_classes + 1, 1),
            Conv1d.init(rng, dims[-1], depth_bins, 1),
            Conv1d.init(rng, dims[-1], rows, 1),
        )

    @property
    def n_classes(self) -> int:
        return self.cls.weight.shape[0] - 1


class AuxLogits(NamedTuple):
    cls: np.ndarray  # (N, W, K + 1), last index is background
    depth: np.ndarray  # (N, W, D)
    height: np.ndarray  # (N, W, H_I)


def aux_forward_cached(width: np.ndarray, params: AuxHeadParams):
    if width.ndim != 3:
        raise ShapeError(f"expected (N, W, C) width features, got {width.shape}")
    h = width
    caches = []
    for layer in params.trunk:
        pre, win = layer.forward(h)
        caches.append((win, pre))
        h = relu(pre)
    outs, wins = [], []
    for branch in (params.cls, params.depth, params.height):
        y, win = branch.forward(h)
        outs.append(y)
        wins.append(win)
    return AuxLogits(*outs), (caches, wins)


def aux_forward(width: np.ndarray, params: AuxHeadParams) -> AuxLogits:
    return aux_forward_cached(width, params)[0]


def aux_backward(dlogits: AuxLogits, cache, params: AuxHeadParams):
    caches, wins = cache
    branch_grads = []
    dh = 0.0
    for branch, d, win in zip((params.cls, params.depth, params.height), dlogits, wins):
        dx, g = branch.backward(d, win)
        dh = dh + dx
        branch_grads.append(g)
    trunk_grads = []
    for layer, (win, pre) in zip(params.trunk[::-1], caches[::-1]):
        dh, g = layer.backward(dh * (pre > 0), win)
        trunk_grads.append(g)
    return dh, AuxHeadParams(trunk_grads[::-1], *branch_grads)


# ---------------------------------------------------------------------------
# targets and loss

@dataclass(frozen=True)
class WidthTarget:
    camera: int
    span: tuple[int, int]
    depth_bin: int
    height_row: int
    cls: int

    @property
    def center(self) -> float:
        return 0.5 * (self.span[0] + self.span[1])

    def validate(self, n_cameras: int, width: int, depth_bins: int, rows: int, n_classes: int) -> None:
        lo, hi = self.span
        if not (0 <= self.camera < n_cameras and 0 <= lo <= hi < width and 0 <= self.depth_bin < depth_bins
                and 0 <= self.height_row < rows and 0 <= self.cls < n_classes):
            raise ValueError(f"invalid target {self}")


def load_targets(path) -> list[WidthTarget]:
    return [
        WidthTarget(int(t["camera"]), (int(t["span"][0]), int(t["span"][1])), int(t["depth_bin"]),
                    int(t["height_row"]), int(t["class"]))
        for t in json.loads(Path(path).read_text())
    ]


def save_targets(targets: list[WidthTarget], path) -> None:
    data = [{"camera": t.camera, "span": list(t.span), "depth_bin": t.depth_bin,
             "height_row": t.height_row, "class": t.cls} for t in targets]
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


class Assignment(NamedTuple):
    cls: np.ndarray  # (N, W) class index, background = K
    depth: np.ndarray  # (N, W), -1 on background columns
    height: np.ndarray  # (N, W), -1 on background columns


def assign_columns(targets: list[WidthTarget], n_cameras: int, width: int, n_classes: int) -> Assignment:
    """Columns inside a span belong to that target; overlaps go to the nearest center, then lower index."""
    cls = np.full((n_cameras, width), n_classes)
    depth = np.full((n_cameras, width), -1)
    height = np.full((n_cameras, width), -1)
    best = np.full((n_cameras, width), np.inf)
    for t in targets:
        lo, hi = t.span
        for j in range(lo, hi + 1):
            dist = abs(j - t.center)
            if dist < best[t.camera, j]:
                best[t.camera, j] = dist
                cls[t.camera, j] = t.cls
                depth[t.camera, j] = t.depth_bin
                height[t.camera, j] = t.height_row
    return Assignment(cls, depth, height)


class AuxLoss(NamedTuple):
    total: float
    cls: float
    depth: float
    height: float


def _ce(logits: np.ndarray, index: np.ndarray, mask: np.ndarray):
    """Summed cross-entropy over masked positions and its logit gradient."""
    lsm = log_softmax(logits, axis=-1)
    safe = np.where(mask, index, 0)
    picked = np.take_along_axis(lsm, safe[..., None], axis=-1)[..., 0]
    loss = float(-(picked * mask).sum())
    grad = softmax(logits, axis=-1)
    np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
    return loss, grad * mask[..., None]


def aux_loss_and_grad(logits: AuxLogits, targets: list[WidthTarget]) -> tuple[AuxLoss, AuxLogits]:
    n, w, k1 = logits.cls.shape
    for t in targets:
        t.validate(n, w, logits.depth.shape[-1], logits.height.shape[-1], k1 - 1)
    a = assign_columns(targets, n, w, k1 - 1)
    everywhere = np.ones((n, w), dtype=bool)
    positive = a.depth >= 0
    l_cls, g_cls = _ce(logits.cls, a.cls, everywhere)
    l_depth, g_depth = _ce(logits.depth, a.depth, positive)
    l_height, g_height = _ce(logits.height, a.height, positive)
    loss = AuxLoss(l_cls + l_depth + l_height, l_cls, l_depth, l_height)
    return loss, AuxLogits(g_cls, g_depth, g_height)


def aux_loss(logits: AuxLogits, targets: list[WidthTarget]) -> AuxLoss:
    """Summed cross-entropies; depth and height terms only on columns covered by a target."""
    return aux_loss_and_grad(logits, targets)[0]


def train_aux_head(params: AuxHeadParams, width: np.ndarray, targets: list[WidthTarget],
                   steps: int = 200, lr: float = 0.01) -> tuple[AuxHeadParams, list[float]]:
    """Full-batch gradient descent on head parameters only; ``width`` is treated as a constant."""
    params = tree_copy(params)
    width = np.array(width, copy=True)
    history = []
    for _ in range(steps):
        logits, cache = aux_forward_cached(width, params)
        loss, dlogits = aux_loss_and_grad(logits, targets)
        history.append(loss.total)
        _, grads = aux_backward(dlogits, cache, params)
        for (_, p), (_, g) in zip(arrays(params), arrays(grads)):
            p -= lr * g
    history.append(aux_loss(aux_forward(width, params), targets).total)
    return params, history
