"""Cross-attention interpolation between the lat-lon grid and the mesh.

Each target point attends over its k nearest source points. Queries come
from geometry alone (unit relative-position vectors through a learned
3 -> d projection), keys and values from RMSNorm-normalized source
features. Neighbor indices and relative positions are fixed when the
operator is built; the same form serves both directions by swapping the
source/target roles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class InterpOperator:
    """Fixed geometry + learned projections for one interpolation direction."""

    neighbors: np.ndarray      # [n_target, k] source indices
    rel_units: np.ndarray      # [n_target, k, 3] unit relative positions
    w_q: Tensor                # [3, d]
    w_k: Tensor                # [d_in, d]
    w_v: Tensor                # [d_in, d]
    w_o: Tensor                # [d, d_out]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


def relative_units(src_xyz: np.ndarray, tgt_xyz: np.ndarray,
                   neighbors: np.ndarray) -> np.ndarray:
    """Unit vectors target - source in 3D Cartesian coordinates.

    Working on the embedded unit sphere avoids longitude wraparound; a
    coincident neighbor (zero distance) maps to the zero vector so the
    softmax stays well defined.
    """
    rel = tgt_xyz[:, None, :] - src_xyz[neighbors]
    norms = np.linalg.norm(rel, axis=-1, keepdims=True)
    return np.where(norms > 0, rel / np.maximum(norms, 1e-300), 0.0)


def build_operator(src_xyz, tgt_xyz, neighbors, w_q, w_k, w_v, w_o) -> InterpOperator:
    return InterpOperator(
        neighbors=np.asarray(neighbors, dtype=np.int64),
        rel_units=relative_units(np.asarray(src_xyz, float), np.asarray(tgt_xyz, float),
                                 np.asarray(neighbors, dtype=np.int64)),
        w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o,
    )


def interpolate(x_source: Tensor, op: InterpOperator) -> Tensor:
    """Attention-weighted transfer of source features onto the targets.

    ``x_source`` is [n_source, c] or [B, n_source, c] with c matching the
    input dim of ``w_k``/``w_v``; returns [.., n_target, d_out].
    """
    if x_source.shape[-2] <= op.neighbors.max():
        raise ValueError(
            f"source size {x_source.shape[-2]} inconsistent with neighbor table")
    if x_source.shape[-1] != op.w_k.shape[0]:
        raise ValueError(
            f"channel dim {x_source.shape[-1]} != w_k input {op.w_k.shape[0]}")
    batched = x_source.ndim == 3
    if not batched:
        x_source = x_source.reshape((1,) + x_source.shape)
    bb = x_source.shape[0]
    nt, k = op.neighbors.shape
    d = op.w_k.shape[1]

    normed = T.rmsnorm(x_source)
    keys = T.matmul(normed, op.w_k)      # [B, ns, d]
    vals = T.matmul(normed, op.w_v)
    flat = op.neighbors.reshape(-1)
    k_n = T.gather(keys, flat, axis=1).reshape((bb, nt, k, d))
    v_n = T.gather(vals, flat, axis=1).reshape((bb, nt, k, d))

    q = Tensor(op.rel_units.astype(x_source.dtype)) @ op.w_q  # [nt, k, d]
    scores = T.scale(T.mul(q, k_n).sum(axis=-1), 1.0 / np.sqrt(d))
    weights = T.softmax(scores, axis=-1)              # [B, nt, k]
    pooled = T.mul(v_n, weights.reshape((bb, nt, k, 1))).sum(axis=2)
    out = T.matmul(pooled, op.w_o)
    return out if batched else out.reshape(out.shape[1:])


def attention_weights(x_source: np.ndarray, op: InterpOperator) -> np.ndarray:
    """The softmax weights only (diagnostic surface, no tape)."""
    normed = x_source / np.sqrt((x_source ** 2).mean(axis=-1, keepdims=True) + 1e-6)
    keys = normed @ op.w_k.data
    q = op.rel_units @ op.w_q.data
    d = op.w_k.shape[1]
    scores = (q * keys[op.neighbors]).sum(axis=-1) / np.sqrt(d)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
