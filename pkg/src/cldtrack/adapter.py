"""Instance-conditioned selection of the bag entry that best matches an image.

Each description embedding ``d_i`` is conditioned on the image through ``L``
learnable context vectors shifted by an affine meta-net output::

    cond_i = normalize(mean(v_1 + m, ..., v_L + m, d_i)),   m = W_meta f + b_meta

Entries are scored by ``softmax(cos(f, cond_i) / tau_temp)``; the winner's raw
embedding is projected with ``softmax(W_proj d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import argmax, as_vector, softmax
from .errors import DegenerateInputError, DimensionMismatchError


@dataclass(frozen=True, eq=False)
class AdapterState:
    context: np.ndarray      # L x q
    meta_w: np.ndarray       # q x q
    meta_b: np.ndarray       # q
    proj: np.ndarray         # q x q
    tau_temp: float = 0.07

    def __post_init__(self):
        ctx = np.asarray(self.context, dtype=np.float64)
        q = np.asarray(self.meta_b).shape[0]
        if ctx.size == 0:
            ctx = ctx.reshape(0, q)
        for name, arr, shape in (("context", ctx, (ctx.shape[0], q)), ("meta_w", self.meta_w, (q, q)),
                                 ("meta_b", self.meta_b, (q,)), ("proj", self.proj, (q, q))):
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != shape:
                raise DimensionMismatchError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise DegenerateInputError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        if not (np.isfinite(self.tau_temp) and self.tau_temp > 0):
            raise ValueError(f"tau_temp must be positive, got {self.tau_temp}")
        object.__setattr__(self, "tau_temp", float(self.tau_temp))

    @property
    def dim(self) -> int:
        return self.meta_b.shape[0]

    @property
    def n_context(self) -> int:
        return self.context.shape[0]

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "n_context": self.n_context,
            "context": self.context.ravel().tolist(),
            "meta_w": self.meta_w.ravel().tolist(),
            "meta_b": self.meta_b.tolist(),
            "proj": self.proj.ravel().tolist(),
            "tau_temp": self.tau_temp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterState":
        q, L = int(d["dim"]), int(d["n_context"])
        return cls(np.asarray(d["context"], dtype=np.float64).reshape(L, q),
                   np.asarray(d["meta_w"], dtype=np.float64).reshape(q, q),
                   np.asarray(d["meta_b"], dtype=np.float64),
                   np.asarray(d["proj"], dtype=np.float64).reshape(q, q),
                   float(d["tau_temp"]))


def init_adapter(dim: int, n_context: int = 4, seed: int = 0, scale: float = 0.02,
                 tau_temp: float = 0.07) -> AdapterState:
    """Small Gaussian context vectors and meta-net, near-identity projection."""
    rng = np.random.default_rng([seed, 0xADA])
    return AdapterState(
        context=rng.normal(0.0, scale, (n_context, dim)),
        meta_w=rng.normal(0.0, scale, (dim, dim)),
        meta_b=np.zeros(dim),
        proj=np.eye(dim) + rng.normal(0.0, scale, (dim, dim)),
        tau_temp=tau_temp,
    )


def plain_adapter(dim: int, tau_temp: float = 0.07) -> AdapterState:
    """No context, zero meta-net, identity projection: selection reduces to cosine matching."""
    return AdapterState(np.zeros((0, dim)), np.zeros((dim, dim)), np.zeros(dim), np.eye(dim), tau_temp)


@dataclass(frozen=True, eq=False)
class SelectedDescription:
    index: int
    raw: np.ndarray
    projected: np.ndarray


def _check_dim(v: np.ndarray, state: AdapterState, name: str):
    if v.shape[-1] != state.dim:
        raise DimensionMismatchError(f"{name} has dim {v.shape[-1]}, adapter expects {state.dim}")


def condition_tokens(image_feat, state: AdapterState, d_i) -> np.ndarray:
    f = as_vector(image_feat, "image_feat")
    d = as_vector(d_i, "d_i")
    _check_dim(f, state, "image_feat")
    _check_dim(d, state, "d_i")
    return condition_all(f, state, d[None])[0]


def condition_all(image_feat: np.ndarray, state: AdapterState, embeddings: np.ndarray) -> np.ndarray:
    """Conditioned, unit-normalized prompt embedding for every row of ``embeddings``."""
    L = state.n_context
    if L == 0:
        u = np.array(embeddings, dtype=np.float64)
    else:
        m = state.meta_w @ image_feat + state.meta_b
        u = (state.context.sum(axis=0) + L * m + embeddings) / (L + 1)
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("conditioned prompt collapsed to the zero vector")
    return u / norms


def _bag_matrix(bag) -> np.ndarray:
    emb = bag.embeddings if hasattr(bag, "embeddings") else np.asarray(bag, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise DegenerateInputError("bag is empty")
    return emb


def description_similarities(image_feat, bag, state: AdapterState) -> np.ndarray:
    f = as_vector(image_feat, "image_feat")
    emb = _bag_matrix(bag)
    _check_dim(f, state, "image_feat")
    _check_dim(emb, state, "bag embeddings")
    cond = condition_all(f, state, emb)
    fn = np.linalg.norm(f)
    if fn == 0.0:
        raise DegenerateInputError("image feature is the zero vector")
    return np.clip(cond @ (f / fn), -1.0, 1.0)


def score_descriptions(image_feat, bag, state: AdapterState) -> np.ndarray:
    """Probability of each bag entry given the image (length K)."""
    return softmax(description_similarities(image_feat, bag, state), state.tau_temp)


def project_normalize(raw, state: AdapterState) -> np.ndarray:
    r = as_vector(raw, "raw")
    _check_dim(r, state, "raw")
    return softmax(state.proj @ r)


def select_description(image_feat, bag, state: AdapterState) -> SelectedDescription:
    # argmax over similarities: same winner as over probabilities, without exp rounding ties
    i = argmax(description_similarities(image_feat, bag, state))
    raw = _bag_matrix(bag)[i]
    return SelectedDescription(i, raw, project_normalize(raw, state))
