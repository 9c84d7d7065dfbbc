"""Three-branch block-sparse attention with learned gating.

Queries are grouped into contiguous blocks (HEALPix NESTED order makes
those blocks spatial neighborhoods) and every token in a query block
attends to the same selected key blocks:

* compression — attention between mean-pooled block representations,
  whose scores double as the routing signal;
* selection — fine attention from each token of a query block over all
  tokens of that block's top-n key blocks, jointly normalized;
* local — dense attention inside large contiguous blocks.

Branch outputs are mixed per token and head by sigmoid gates. A
token-level selection path (``nsa_forward``) and a chunked dense path are
provided as references for oracle tests and benchmarks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class AttentionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int
    gqa_ratio: int
    head_dim: int
    local_block_size: int
    sparse_block_size: int
    top_n: int
    rope_theta: float = 10000.0
    use_compress: bool = True
    use_select: bool = True
    use_local: bool = True

    def __post_init__(self):
        if self.num_heads % self.gqa_ratio != 0:
            raise AttentionConfigError(
                f"gqa_ratio {self.gqa_ratio} must divide num_heads {self.num_heads}")
        if self.head_dim % 4 != 0:
            raise AttentionConfigError("head_dim must be divisible by 4 for 2D RoPE")
        if self.top_n < 1:
            raise AttentionConfigError("top_n must be >= 1")

    @property
    def kv_heads(self) -> int:
        return self.num_heads // self.gqa_ratio

    @property
    def model_dim(self) -> int:
        return self.num_heads * self.head_dim

    def validate_length(self, n: int) -> None:
        """Reject sequence lengths we cannot block; never pad silently."""
        b, bl = self.sparse_block_size, self.local_block_size
        if n % b != 0:
            raise AttentionConfigError(f"sequence length {n} not divisible by sparse block {b}")
        if n % bl != 0:
            raise AttentionConfigError(f"sequence length {n} not divisible by local block {bl}")
        if self.top_n > n // b:
            raise AttentionConfigError(f"top_n {self.top_n} exceeds block count {n // b}")


@dataclass
class AttentionWeights:
    """Projection weights for one attention layer (all Tensors)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_gate: Tensor
    b_gate: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v,
                "w_o": self.w_o, "w_gate": self.w_gate, "b_gate": self.b_gate}


@dataclass
class BsaOutput:
    out: Tensor                      # [B, N, d_model]
    o_compress: Tensor | None        # [B, H, N, hd]
    o_select: Tensor | None
    o_local: Tensor | None
    gates: Tensor                    # [B, N, 3, H] sigmoid values
    block_scores: Tensor | None      # [B, H, m, m]
    selected: np.ndarray | None      # [B, H, m, top_n] sorted block ids


def random_weights(cfg: AttentionConfig, d_model: int | None = None, seed: int = 0,
                   dtype=np.float64) -> AttentionWeights:
    """Gaussian init at 1/sqrt(d) scale; handy for tests and benchmarks."""
    d = d_model or cfg.model_dim
    rng = np.random.default_rng(seed)
    hq = cfg.num_heads * cfg.head_dim
    hkv = cfg.kv_heads * cfg.head_dim

    def mk(rows, cols):
        return Tensor((rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(dtype),
                      requires_grad=True)

    return AttentionWeights(
        w_q=mk(d, hq), w_k=mk(d, hkv), w_v=mk(d, hkv), w_o=mk(hq, d),
        w_gate=mk(d, 3 * cfg.num_heads),
        b_gate=Tensor(np.zeros(3 * cfg.num_heads, dtype=dtype), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# rotary embedding over (longitude, latitude)

def rope_angles(lat: np.ndarray, lon: np.ndarray, head_dim: int,
                theta: float) -> np.ndarray:
    """Per-token rotation angles, shape [N, head_dim//2].

    The head dimension is split equally between the two sphere coordinates;
    each half carries standard rotary frequencies theta**(-2i/half_dim)
    applied to the angle in radians.
    """
    half = head_dim // 2
    n_pairs = half // 2
    freqs = theta ** (-2.0 * np.arange(n_pairs) / half)
    return np.concatenate([
        np.asarray(lon, dtype=np.float64)[:, None] * freqs,
        np.asarray(lat, dtype=np.float64)[:, None] * freqs,
    ], axis=1)


def apply_rope(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotate consecutive pairs of ``x``'s last axis by cached cos/sin.

    ``x`` is [..., N, head_dim]; cos/sin are [N, head_dim//2] constants.
    """
    shape = x.shape
    pairs = x.reshape(shape[:-1] + (shape[-1] // 2, 2))
    x1 = T.slice_axis(pairs, -1, 0, 1)
    x2 = T.slice_axis(pairs, -1, 1, 2)
    r1 = T.sub(T.mul(x1, cos), T.mul(x2, sin))
    r2 = T.add(T.mul(x1, sin), T.mul(x2, cos))
    return T.concat([r1, r2], axis=-1).reshape(shape)


def _rope_cache(cfg: AttentionConfig, lat, lon, dtype) -> tuple[Tensor, Tensor]:
    ang = rope_angles(lat, lon, cfg.head_dim, cfg.rope_theta)
    cos = np.cos(ang)[:, :, None].astype(dtype)
    sin = np.sin(ang)[:, :, None].astype(dtype)
    return Tensor(cos), Tensor(sin)


# ---------------------------------------------------------------------------
# branches (q, k, v are [B, H, N, head_dim] tensors, k/v already GQA-expanded)

def compress_branch(q: Tensor, k: Tensor, v: Tensor, b: int) -> tuple[Tensor, Tensor]:
    """Block-to-block attention over mean-pooled q/k/v.

    Returns the coarse output broadcast to every token of its query block
    and the block score matrix used by the selection branch.
    """
    bb, h, n, hd = q.shape
    if n % b != 0:
        raise AttentionConfigError(f"length {n} not divisible by block size {b}")
    m = n // b
    qb = q.reshape((bb, h, m, b, hd)).mean(axis=3)
    kb = k.reshape((bb, h, m, b, hd)).mean(axis=3)
    vb = v.reshape((bb, h, m, b, hd)).mean(axis=3)
    scores = T.matmul(T.scale(qb, 1.0 / np.sqrt(hd)), T.transpose(kb))
    abar = T.softmax(scores, axis=-1)
    coarse = T.matmul(abar, vb)  # [B, H, m, hd]
    tokens = T.gather(coarse, np.repeat(np.arange(m), b), axis=2)
    return tokens, abar


def top_blocks(abar: np.ndarray, top_n: int) -> np.ndarray:
    """Top-n block ids per query block; ties break toward the lower index.

    Selection indices are detached: gradients flow through the gathered
    keys/values and through the compression branch's own output only.
    """
    order = np.argsort(-abar, axis=-1, kind="stable")
    sel = order[..., :top_n]
    return np.sort(sel, axis=-1)


def select_branch(q: Tensor, k: Tensor, v: Tensor, abar: Tensor, top_n: int,
                  b: int) -> tuple[Tensor, np.ndarray]:
    """Fine attention over the jointly selected key blocks of each query block."""
    bb, h, n, hd = q.shape
    m = n // b
    if top_n > m:
        raise AttentionConfigError(f"top_n {top_n} exceeds block count {m}")
    sel = top_blocks(abar.data, top_n)  # [B, H, m, top_n]

    tok = (sel[..., None] * b + np.arange(b)).reshape(bb, h, m * top_n * b, 1)
    k_sel = T.take_along(k, tok, axis=2).reshape((bb, h, m, top_n * b, hd))
    v_sel = T.take_along(v, tok, axis=2).reshape((bb, h, m, top_n * b, hd))
    qb = q.reshape((bb, h, m, b, hd))
    scores = T.matmul(T.scale(qb, 1.0 / np.sqrt(hd)), T.transpose(k_sel))
    weights = T.softmax(scores, axis=-1)  # normalized over all selected keys
    out = T.matmul(weights, v_sel).reshape((bb, h, n, hd))
    return out, sel


def local_branch(q: Tensor, k: Tensor, v: Tensor, block: int) -> Tensor:
    """Independent dense attention within contiguous blocks of ``block`` tokens."""
    bb, h, n, hd = q.shape
    if n % block != 0:
        raise AttentionConfigError(f"length {n} not divisible by local block {block}")
    nl = n // block
    qb = q.reshape((bb, h, nl, block, hd))
    kb = k.reshape((bb, h, nl, block, hd))
    vb = v.reshape((bb, h, nl, block, hd))
    scores = T.matmul(T.scale(qb, 1.0 / np.sqrt(hd)), T.transpose(kb))
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, vb).reshape((bb, h, n, hd))


# ---------------------------------------------------------------------------
# full layers

def _project_heads(x: Tensor, w: Tensor, heads: int, hd: int) -> Tensor:
    bb, n, _ = x.shape
    return T.transpose(T.matmul(x, w).reshape((bb, n, heads, hd)), (0, 2, 1, 3))


def _qkv(x: Tensor, weights: AttentionWeights, cfg: AttentionConfig,
         positions) -> tuple[Tensor, Tensor, Tensor]:
    """Projections, 2D RoPE, and GQA expansion of k/v to all query heads."""
    hd = cfg.head_dim
    q = _project_heads(x, weights.w_q, cfg.num_heads, hd)
    k = _project_heads(x, weights.w_k, cfg.kv_heads, hd)
    v = _project_heads(x, weights.w_v, cfg.kv_heads, hd)
    if positions is not None:
        lat, lon = positions
        cos, sin = _rope_cache(cfg, lat, lon, x.dtype)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
    if cfg.gqa_ratio > 1:
        share = np.repeat(np.arange(cfg.kv_heads), cfg.gqa_ratio)
        k = T.gather(k, share, axis=1)
        v = T.gather(v, share, axis=1)
    return q, k, v


def _gates(x: Tensor, weights: AttentionWeights, cfg: AttentionConfig,
           gate_override=None) -> Tensor:
    bb, n, _ = x.shape
    g = T.sigmoid(T.add(T.matmul(x, weights.w_gate), weights.b_gate))
    g = g.reshape((bb, n, 3, cfg.num_heads))
    if gate_override is not None:
        forced = np.zeros((1, 1, 3, 1), dtype=x.dtype)
        forced[0, 0, :, 0] = gate_override
        g = Tensor(np.broadcast_to(forced, g.shape).copy())
    return g


def _mix_heads(parts, gates: Tensor, w_o: Tensor, cfg: AttentionConfig) -> Tensor:
    """Gate-weighted sum of branch outputs, head merge, output projection."""
    mixed = None
    for slot, branch in enumerate(parts):
        if branch is None:
            continue
        gate = T.transpose(T.slice_axis(gates, 2, slot, slot + 1), (0, 3, 1, 2))
        term = T.mul(branch, gate)  # gate [B, H, N, 1] scales per token+head
        mixed = term if mixed is None else T.add(mixed, term)
    bb, h, n, hd = mixed.shape
    merged = T.transpose(mixed, (0, 2, 1, 3)).reshape((bb, n, h * hd))
    return T.matmul(merged, w_o)


def _ensure_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    return x, False


def bsa_forward(x: Tensor, weights: AttentionWeights, cfg: AttentionConfig,
                positions=None, gate_override=None) -> BsaOutput:
    """Full block-sparse attention layer.

    ``x`` is [N, d_model] or [B, N, d_model]; ``positions`` is an optional
    (lat, lon) pair of per-token angles for RoPE. ``gate_override`` forces
    the three gate values to constants (testing hook).
    """
    x, squeezed = _ensure_batched(x)
    cfg.validate_length(x.shape[1])
    q, k, v = _qkv(x, weights, cfg, positions)

    o_cg = o_fg = o_l = None
    abar = None
    sel = None
    if cfg.use_compress or cfg.use_select:
        o_cg, abar = compress_branch(q, k, v, cfg.sparse_block_size)
        if not cfg.use_compress:
            o_cg = None
    if cfg.use_select:
        o_fg, sel = select_branch(q, k, v, abar, cfg.top_n, cfg.sparse_block_size)
    if cfg.use_local:
        o_l = local_branch(q, k, v, cfg.local_block_size)

    gates = _gates(x, weights, cfg, gate_override)
    out = _mix_heads((o_cg, o_fg, o_l), gates, weights.w_o, cfg)
    if squeezed:
        out = out.reshape(out.shape[1:])
    return BsaOutput(out=out, o_compress=o_cg, o_select=o_fg, o_local=o_l,
                     gates=gates, block_scores=abar, selected=sel)


def nsa_forward(x: Tensor, weights: AttentionWeights, cfg: AttentionConfig,
                positions=None, gate_override=None, chunk: int = 4096) -> Tensor:
    """Token-level selection reference: each query token routes independently.

    Same three-branch structure, but compression scores are per token, the
    top-n key blocks are chosen per token, and the local branch is a
    sliding window of ``local_block_size`` tokens centered on the query.
    """
    x, squeezed = _ensure_batched(x)
    bb, n, _ = x.shape
    b = cfg.sparse_block_size
    if n % b != 0:
        raise AttentionConfigError(f"length {n} not divisible by sparse block {b}")
    m = n // b
    if cfg.top_n > m:
        raise AttentionConfigError(f"top_n {cfg.top_n} exceeds block count {m}")
    hd = cfg.head_dim
    q, k, v = _qkv(x, weights, cfg, positions)

    kb = k.reshape((bb, cfg.num_heads, m, b, hd)).mean(axis=3)
    vb = v.reshape((bb, cfg.num_heads, m, b, hd)).mean(axis=3)
    scores = T.matmul(T.scale(q, 1.0 / np.sqrt(hd)), T.transpose(kb))  # [B,H,N,m]
    a = T.softmax(scores, axis=-1)
    o_cg = T.matmul(a, vb) if cfg.use_compress else None

    o_fg = None
    if cfg.use_select:
        sel = top_blocks(a.data, cfg.top_n)  # per token: [B, H, N, top_n]
        parts = []
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            tok = (sel[:, :, start:stop, :, None] * b + np.arange(b))
            tok = tok.reshape(bb, cfg.num_heads, -1, 1)
            k_sel = T.take_along(k, tok, axis=2).reshape(
                (bb, cfg.num_heads, stop - start, cfg.top_n * b, hd))
            v_sel = T.take_along(v, tok, axis=2).reshape(
                (bb, cfg.num_heads, stop - start, cfg.top_n * b, hd))
            qc = T.scale(T.slice_axis(q, 2, start, stop), 1.0 / np.sqrt(hd))
            qc = qc.reshape((bb, cfg.num_heads, stop - start, 1, hd))
            s = T.matmul(qc, T.transpose(k_sel))
            w = T.softmax(s, axis=-1)
            parts.append(T.matmul(w, v_sel).reshape(
                (bb, cfg.num_heads, stop - start, hd)))
        o_fg = T.concat(parts, axis=2) if len(parts) > 1 else parts[0]

    o_l = None
    if cfg.use_local:
        o_l = _sliding_window(q, k, v, cfg.local_block_size)

    gates = _gates(x, weights, cfg, gate_override)
    out = _mix_heads((o_cg, o_fg, o_l), gates, weights.w_o, cfg)
    return out.reshape(out.shape[1:]) if squeezed else out


def _sliding_window(q: Tensor, k: Tensor, v: Tensor, window: int) -> Tensor:
    """Per-token attention over a centered window, edges masked not clamped."""
    bb, h, n, hd = q.shape
    offs = np.arange(window) - window // 2
    idx = np.arange(n)[:, None] + offs
    valid = (idx >= 0) & (idx < n)
    idx = np.clip(idx, 0, n - 1)
    mask = np.where(valid, 0.0, -1e30).astype(q.dtype)[None, None, :, :]

    tok = idx.reshape(1, 1, n * window, 1)
    tok = np.broadcast_to(tok, (bb, h, n * window, 1))
    k_w = T.take_along(k, tok, axis=2).reshape((bb, h, n, window, hd))
    v_w = T.take_along(v, tok, axis=2).reshape((bb, h, n, window, hd))
    qe = T.scale(q, 1.0 / np.sqrt(hd)).reshape((bb, h, n, 1, hd))
    s = T.add(T.matmul(qe, T.transpose(k_w)).reshape((bb, h, n, window)),
              Tensor(np.broadcast_to(mask, (bb, h, n, window)).copy()))
    w = T.softmax(s, axis=-1)
    return T.matmul(w.reshape((bb, h, n, 1, window)), v_w).reshape((bb, h, n, hd))


def dense_forward(x: Tensor, weights: AttentionWeights, cfg: AttentionConfig,
                  positions=None, chunk: int = 2048) -> Tensor:
    """Full softmax attention, chunked over queries to bound memory."""
    x, squeezed = _ensure_batched(x)
    bb, n, _ = x.shape
    hd = cfg.head_dim
    q, k, v = _qkv(x, weights, cfg, positions)
    kt = T.transpose(k)
    parts = []
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        qc = T.scale(T.slice_axis(q, 2, start, stop), 1.0 / np.sqrt(hd))
        w = T.softmax(T.matmul(qc, kt), axis=-1)
        parts.append(T.matmul(w, v))
    att = T.concat(parts, axis=2) if len(parts) > 1 else parts[0]
    merged = T.transpose(att, (0, 2, 1, 3)).reshape((bb, n, cfg.num_heads * hd))
    out = T.matmul(merged, weights.w_o)
    return out.reshape(out.shape[1:]) if squeezed else out


# ---------------------------------------------------------------------------
# cost accounting and wall-clock benchmark

def attention_macs(cfg: AttentionConfig, n: int, variant: str = "bsa") -> dict[str, int]:
    """Counted multiply-accumulates of the attention branches at length n.

    Projections are excluded: the counts isolate the score/value terms the
    cost model describes (compression N^2/b^2, selection N*n*b, local N*b;
    dense N^2).
    """
    h, hd, b = cfg.num_heads, cfg.head_dim, cfg.sparse_block_size
    m = n // b
    if variant == "dense":
        return {"total": 2 * h * n * n * hd}
    if variant == "bsa":
        compress = 2 * h * m * m * hd
        select = 2 * h * n * cfg.top_n * b * hd
        local = 2 * h * n * cfg.local_block_size * hd
    elif variant == "nsa":
        compress = 2 * h * n * m * hd
        select = 2 * h * n * cfg.top_n * b * hd
        local = 2 * h * n * cfg.local_block_size * hd
    else:
        raise AttentionConfigError(f"unknown variant {variant!r}")
    return {"compress": compress, "select": select, "local": local,
            "total": compress + select + local}


def bench_attention(cfg: AttentionConfig, lengths, variants=("bsa", "nsa", "dense"),
                    reps: int = 3, seed: int = 0, dtype=np.float32,
                    include_backward: bool = False):
    """Median-of-``reps`` forward wall times; rows of (length, variant, ms).

    Times are hardware-specific; scaling exponents are the meaningful
    output. Lengths must ascend and divide the configured block sizes.
    """
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise AttentionConfigError("lengths must ascend")
    rng = np.random.default_rng(seed)
    weights = random_weights(cfg, seed=seed, dtype=dtype)
    rows = []
    fns = {"bsa": lambda x: bsa_forward(x, weights, cfg).out,
           "nsa": lambda x: nsa_forward(x, weights, cfg),
           "dense": lambda x: dense_forward(x, weights, cfg)}
    for n in lengths:
        cfg.validate_length(n)
        x = Tensor(rng.standard_normal((n, cfg.model_dim)).astype(dtype))
        for variant in variants:
            fn = fns[variant]
            fn(x)  # warmup
            times = []
            for _ in range(reps):
                if include_backward:
                    with T.GradTape() as tape:
                        t0 = time.perf_counter()
                        loss = fn(x).sum()
                        tape.backward(loss)
                        times.append(1e3 * (time.perf_counter() - t0))
                else:
                    t0 = time.perf_counter()
                    fn(x)
                    times.append(1e3 * (time.perf_counter() - t0))
            rows.append((n, variant, float(np.median(times))))
    return rows


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])
