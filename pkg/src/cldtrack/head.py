"""Convolutional prediction head: stacked (3x3 conv, per-channel affine, ReLU)
stages followed by 1x1 projections to classification, offset and size maps.

All tensors are batched ``B x C x H x W`` float64 arrays. The per-channel affine
plays the role of batch normalization with frozen statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError

OUTPUTS = (("cls", 1), ("offset", 2), ("size", 2))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _im2col(x: np.ndarray) -> np.ndarray:
    """``B x C x H x W`` -> ``B x (C*9) x (H*W)`` of zero-padded 3x3 neighbourhoods."""
    b, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.stack([xp[:, :, dy:dy + h, dx:dx + wd] for dy in range(3) for dx in range(3)], axis=2)
    return cols.reshape(b, c * 9, h * wd)


def conv3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' 3x3 convolution (cross-correlation); ``w`` is ``O x C x 3 x 3``."""
    b, c, h, wd = x.shape
    if w.shape[1] != c:
        raise DimensionMismatchError(f"conv expects {w.shape[1]} input channels, got {c}")
    out = np.matmul(w.reshape(w.shape[0], -1), _im2col(x))
    return out.reshape(b, w.shape[0], h, wd)


def conv3x3_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, c, h, wd = x.shape
    o = w.shape[0]
    cols = _im2col(x)
    d2 = dout.reshape(b, o, h * wd)
    dw = np.matmul(d2.transpose(1, 0, 2).reshape(o, -1), cols.transpose(0, 2, 1).reshape(-1, c * 9))
    dcols = np.matmul(w.reshape(o, -1).T, d2).reshape(b, c, 3, 3, h, wd)
    dxp = np.zeros((b, c, h + 2, wd + 2))
    for dy in range(3):
        for dx in range(3):
            dxp[:, :, dy:dy + h, dx:dx + wd] += dcols[:, :, dy, dx]
    return dxp[:, :, 1:-1, 1:-1], dw.reshape(w.shape)


@dataclass(eq=False)
class HeadParams:
    conv: list[np.ndarray]       # per stage: O x C x 3 x 3
    gamma: list[np.ndarray]      # per stage: O
    beta: list[np.ndarray]       # per stage: O
    out_w: dict[str, np.ndarray] = field(default_factory=dict)  # name -> k x C
    out_b: dict[str, np.ndarray] = field(default_factory=dict)  # name -> k

    def __post_init__(self):
        if not (len(self.conv) == len(self.gamma) == len(self.beta)):
            raise DimensionMismatchError("stage lists differ in length")
        c_prev = None
        for i, (w, g, bt) in enumerate(zip(self.conv, self.gamma, self.beta)):
            if w.ndim != 4 or w.shape[2:] != (3, 3):
                raise DimensionMismatchError(f"stage {i}: kernel must be O x C x 3 x 3, got {w.shape}")
            if c_prev is not None and w.shape[1] != c_prev:
                raise DimensionMismatchError(f"stage {i}: expects {w.shape[1]} channels, previous stage gives {c_prev}")
            if g.shape != (w.shape[0],) or bt.shape != (w.shape[0],):
                raise DimensionMismatchError(f"stage {i}: affine parameters do not match {w.shape[0]} channels")
            c_prev = w.shape[0]
        for name, k in OUTPUTS:
            w = self.out_w[name]
            if w.shape != (k, self.channels) or self.out_b[name].shape != (k,):
                raise DimensionMismatchError(f"{name} projection has shape {w.shape}, expected {(k, self.channels)}")

    @property
    def in_channels(self) -> int:
        return self.conv[0].shape[1] if self.conv else self.out_w["cls"].shape[1]

    @property
    def channels(self) -> int:
        return self.conv[-1].shape[0] if self.conv else self.out_w["cls"].shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, g, b) in enumerate(zip(self.conv, self.gamma, self.beta)):
            out[f"head.conv{i}"] = w
            out[f"head.gamma{i}"] = g
            out[f"head.beta{i}"] = b
        for name, _ in OUTPUTS:
            out[f"head.{name}_w"] = self.out_w[name]
            out[f"head.{name}_b"] = self.out_b[name]
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "HeadParams":
        n = sum(1 for k in arrays if k.startswith("head.conv"))
        return cls(
            [np.asarray(arrays[f"head.conv{i}"], dtype=np.float64) for i in range(n)],
            [np.asarray(arrays[f"head.gamma{i}"], dtype=np.float64) for i in range(n)],
            [np.asarray(arrays[f"head.beta{i}"], dtype=np.float64) for i in range(n)],
            {name: np.asarray(arrays[f"head.{name}_w"], dtype=np.float64) for name, _ in OUTPUTS},
            {name: np.asarray(arrays[f"head.{name}_b"], dtype=np.float64) for name, _ in OUTPUTS},
        )


def init_head(in_channels: int, channels: int = 16, stages: int = 4, seed: int = 0,
              cls_prior: float = 0.1) -> HeadParams:
    """He-initialized kernels, unit affine, classification bias set to a low prior."""
    rng = np.random.default_rng([seed, 0x4EAD])
    conv, gamma, beta = [], [], []
    c_in = in_channels
    for _ in range(stages):
        conv.append(rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), (channels, c_in, 3, 3)))
        gamma.append(np.ones(channels))
        beta.append(np.zeros(channels))
        c_in = channels
    out_w, out_b = {}, {}
    for name, k in OUTPUTS:
        out_w[name] = rng.normal(0.0, np.sqrt(1.0 / c_in), (k, c_in)) * 0.1
        out_b[name] = np.zeros(k)
    out_b["cls"][:] = np.log(cls_prior / (1.0 - cls_prior))
    return HeadParams(conv, gamma, beta, out_w, out_b)


def head_forward(x: np.ndarray, params: HeadParams, keep: bool = False):
    """Returns ``{"cls", "offset", "size"}`` sigmoid maps (and a cache when ``keep``)."""
    if x.shape[1] != params.in_channels:
        raise DimensionMismatchError(f"head expects {params.in_channels} channels, got {x.shape[1]}")
    cache = {"inputs": [], "pre": []}
    h = x
    for w, g, b in zip(params.conv, params.gamma, params.beta):
        z = conv3x3(h, w)
        a = g[None, :, None, None] * z + b[None, :, None, None]
        if keep:
            cache["inputs"].append(h)
            cache["pre"].append(z)
        h = np.maximum(a, 0.0)
    cache["features"] = h
    maps = {}
    for name, _ in OUTPUTS:
        logits = np.einsum("kc,bchw->bkhw", params.out_w[name], h) + params.out_b[name][None, :, None, None]
        maps[name] = sigmoid(logits)
    return (maps, cache) if keep else maps


def head_backward(dmaps: dict[str, np.ndarray], maps: dict[str, np.ndarray], cache: dict,
                  params: HeadParams) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Backpropagate gradients w.r.t. the sigmoid maps; returns (d input, d params by name)."""
    grads: dict[str, np.ndarray] = {}
    h = cache["features"]
    dh = np.zeros_like(h)
    for name, _ in OUTPUTS:
        s = maps[name]
        dlogit = dmaps[name] * s * (1.0 - s)
        grads[f"head.{name}_w"] = np.einsum("bkhw,bchw->kc", dlogit, h)
        grads[f"head.{name}_b"] = dlogit.sum(axis=(0, 2, 3))
        dh += np.einsum("kc,bkhw->bchw", params.out_w[name], dlogit)
    for i in reversed(range(len(params.conv))):
        z = cache["pre"][i]
        g, b = params.gamma[i], params.beta[i]
        a = g[None, :, None, None] * z + b[None, :, None, None]
        da = dh * (a > 0)
        grads[f"head.gamma{i}"] = (da * z).sum(axis=(0, 2, 3))
        grads[f"head.beta{i}"] = da.sum(axis=(0, 2, 3))
        dz = da * g[None, :, None, None]
        dh, grads[f"head.conv{i}"] = conv3x3_backward(dz, cache["inputs"][i], params.conv[i])
    return dh, grads
