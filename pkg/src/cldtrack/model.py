"""End-to-end differentiable training path: adapter scoring, projection,
temporal attention, correlation, head, and the tracking loss, with a
hand-written backward pass.

During training the bag entry is selected softly (probability-weighted mean
of the bag embeddings) so the context vectors, meta-net and temperature
receive gradient; inference uses the hard argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import AdapterState
from .errors import DimensionMismatchError, SchemaError
from .head import HeadParams, head_backward, head_forward
from .losses import LossConfig, focal_loss_grad, gaussian_target, giou_loss_grad, l1_loss_grad
from .persist import load_container, save_container


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_rows_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


@dataclass(eq=False)
class ModelParams:
    head: HeadParams
    adapter: AdapterState

    def arrays(self) -> dict[str, np.ndarray]:
        a = self.adapter
        return {
            **self.head.arrays(),
            "adapter.context": a.context,
            "adapter.meta_w": a.meta_w,
            "adapter.meta_b": a.meta_b,
            "adapter.proj": a.proj,
            "adapter.tau_temp": np.array([a.tau_temp]),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        adapter = AdapterState(arrays["adapter.context"], arrays["adapter.meta_w"], arrays["adapter.meta_b"],
                               arrays["adapter.proj"], float(np.asarray(arrays["adapter.tau_temp"]).ravel()[0]))
        return cls(HeadParams.from_arrays(arrays), adapter)

    def names(self) -> list[str]:
        return list(self.arrays())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in self.arrays().values()])

    def with_vector(self, vec: np.ndarray) -> "ModelParams":
        out, i = {}, 0
        for name, arr in self.arrays().items():
            n = arr.size
            out[name] = np.asarray(vec[i:i + n], dtype=np.float64).reshape(arr.shape)
            i += n
        if i != len(vec):
            raise DimensionMismatchError(f"vector has {len(vec)} entries, parameters need {i}")
        return ModelParams.from_arrays(out)

    def grad_vector(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.ravel(grads[name]) for name in self.arrays()])

    def to_dict(self) -> dict:
        return {name: {"shape": list(arr.shape), "data": np.ravel(arr).tolist()}
                for name, arr in self.arrays().items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls.from_arrays({name: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                                for name, v in d.items()})


@dataclass(eq=False)
class TrainBatch:
    """Pre-extracted training pairs. Boxes are ``(x, y, w, h)`` in units of the search side."""

    fmaps: np.ndarray           # B x D x G x G
    exemplar_feats: np.ndarray  # B x q
    search_feats: np.ndarray    # B x q
    bag: np.ndarray             # K x q
    gt_boxes: np.ndarray        # B x 4
    target_cls: np.ndarray      # B x G x G
    gt_cells: np.ndarray        # B x 2 (row, col)

    @property
    def size(self) -> int:
        return self.fmaps.shape[0]

    def subset(self, idx) -> "TrainBatch":
        return TrainBatch(self.fmaps[idx], self.exemplar_feats[idx], self.search_feats[idx], self.bag,
                          self.gt_boxes[idx], self.target_cls[idx], self.gt_cells[idx])


def targets_for_boxes(gt_boxes: np.ndarray, grid: int, sigma: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian classification targets and the (row, col) cell holding each box centre."""
    boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cx = boxes[:, 0] + boxes[:, 2] / 2.0
    cy = boxes[:, 1] + boxes[:, 3] / 2.0
    cols = np.clip(np.floor(cx * grid), 0, grid - 1).astype(int)
    rows = np.clip(np.floor(cy * grid), 0, grid - 1).astype(int)
    targets = np.stack([gaussian_target(grid, r, c, sigma) for r, c in zip(rows, cols)])
    return targets, np.stack([rows, cols], axis=1)


def _text_forward(feats: np.ndarray, bag: np.ndarray, ad: AdapterState, soft: bool):
    L = ad.n_context
    if L:
        m = feats @ ad.meta_w.T + ad.meta_b
        u = ((ad.context.sum(axis=0) + L * m)[:, None, :] + bag[None, :, :]) / (L + 1)
    else:
        u = np.broadcast_to(bag[None], (feats.shape[0], *bag.shape))
    nu = np.linalg.norm(u, axis=2, keepdims=True)
    c = u / nu
    fh = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    s = np.einsum("bkq,bq->bk", c, fh)
    p = _softmax_rows(s / ad.tau_temp)
    if soft:
        t = p @ bag
    else:
        t = bag[np.argmax(s, axis=1)]
    y = t @ ad.proj.T
    tt = _softmax_rows(y)
    return tt, dict(feats=feats, nu=nu, c=c, fh=fh, s=s, p=p, t=t, tt=tt)


def _text_backward(dtt: np.ndarray, cache: dict, bag: np.ndarray, ad: AdapterState, grads: dict):
    L = ad.n_context
    tau = ad.tau_temp
    dy = _softmax_rows_backward(cache["tt"], dtt)
    grads["adapter.proj"] += dy.T @ cache["t"]
    dt = dy @ ad.proj
    dp = dt @ bag.T
    dg = _softmax_rows_backward(cache["p"], dp)
    grads["adapter.tau_temp"] += -np.sum(dg * cache["s"]) / tau ** 2
    ds = dg / tau
    c = cache["c"]
    dc = ds[:, :, None] * cache["fh"][:, None, :]
    du = (dc - c * (c * dc).sum(axis=2, keepdims=True)) / cache["nu"]
    if L:
        du_sum = du.sum(axis=1)
        grads["adapter.context"] += np.broadcast_to(du_sum.sum(axis=0) / (L + 1), (L, ad.dim))
        dm = du_sum * (L / (L + 1))
        grads["adapter.meta_w"] += dm.T @ cache["feats"]
        grads["adapter.meta_b"] += dm.sum(axis=0)


def forward_backward(params: ModelParams, batch: TrainBatch, cfg: LossConfig = LossConfig(),
                     need_grad: bool = True, soft: bool = True):
    """Mean tracking loss over the batch, per-component means, and gradients by parameter name."""
    ad = params.adapter
    q = ad.dim
    if batch.fmaps.shape[1] != q or batch.bag.shape[1] != q:
        raise DimensionMismatchError("feature channels, bag and adapter dimensions must agree")
    B, _, G, _ = batch.fmaps.shape

    tt_e, cache_e = _text_forward(batch.exemplar_feats, batch.bag, ad, soft)
    tt_s, cache_s = _text_forward(batch.search_feats, batch.bag, ad, soft)
    # a single buffered search feature: the window aggregate is that feature itself
    diff = tt_e - tt_s
    w_att = _softmax_rows(-np.abs(diff))
    t_att = w_att * tt_e
    corr = (1.0 + t_att)[:, :, None, None] * batch.fmaps

    maps, hcache = head_forward(corr, params.head, keep=True)
    cls_map, off, size = maps["cls"], maps["offset"], maps["size"]

    d_cls = np.zeros_like(cls_map)
    d_off = np.zeros_like(off)
    d_size = np.zeros_like(size)
    comp = np.zeros(3)
    for b in range(B):
        fl, fg = focal_loss_grad(cls_map[b, 0], batch.target_cls[b], cfg)
        r, c = batch.gt_cells[b]
        ox, oy = off[b, 0, r, c], off[b, 1, r, c]
        sw, sh = size[b, 0, r, c], size[b, 1, r, c]
        cx, cy = (c + ox) / G, (r + oy) / G
        box = np.array([cx - sw / 2.0, cy - sh / 2.0, sw, sh])
        gl, gg = giou_loss_grad(box, batch.gt_boxes[b])
        ll, lg = l1_loss_grad(box, batch.gt_boxes[b])
        comp += (fl, gl, ll)
        d_cls[b, 0] = fg / B
        dbox = (cfg.lambda_iou * gg + cfg.lambda_l1 * lg) / B
        d_off[b, 0, r, c] = dbox[0] / G
        d_off[b, 1, r, c] = dbox[1] / G
        d_size[b, 0, r, c] = dbox[2] - 0.5 * dbox[0]
        d_size[b, 1, r, c] = dbox[3] - 0.5 * dbox[1]
    comp /= B
    loss = float(comp[0] + cfg.lambda_iou * comp[1] + cfg.lambda_l1 * comp[2])
    components = {"cls": float(comp[0]), "iou": float(comp[1]), "l1": float(comp[2])}
    if not need_grad:
        return loss, components, None

    d_corr, grads = head_backward({"cls": d_cls, "offset": d_off, "size": d_size}, maps, hcache, params.head)
    for name, arr in params.arrays().items():
        if name.startswith("adapter."):
            grads[name] = np.zeros_like(arr)

    d_tatt = (d_corr * batch.fmaps).sum(axis=(2, 3))
    d_w = d_tatt * tt_e
    d_tt_e = d_tatt * w_att
    dz = _softmax_rows_backward(w_att, d_w)
    sgn = np.sign(diff)
    d_tt_e -= dz * sgn
    d_tt_s = dz * sgn
    _text_backward(d_tt_e, cache_e, batch.bag, ad, grads)
    _text_backward(d_tt_s, cache_s, batch.bag, ad, grads)
    grads["adapter.tau_temp"] = np.atleast_1d(grads["adapter.tau_temp"])
    return loss, components, grads


def loss_fn(params: ModelParams, batch: TrainBatch, cfg: LossConfig = LossConfig()):
    """Scalar loss of a flat parameter vector, for finite differencing."""
    def f(vec: np.ndarray) -> float:
        return forward_backward(params.with_vector(vec), batch, cfg, need_grad=False)[0]
    return f


def save_params(path, params: ModelParams, meta: dict | None = None) -> None:
    """Head and adapter parameters in the versioned, checksummed container."""
    save_container(path, {"kind": "model-params", "meta": meta or {}, "params": params.to_dict()})


def load_params(path) -> ModelParams:
    doc = load_container(path)
    if doc.get("kind") != "model-params" or not isinstance(doc.get("params"), dict):
        raise SchemaError(f"{path}: not a parameter file")
    try:
        return ModelParams.from_dict(doc["params"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed parameters ({exc})") from exc
