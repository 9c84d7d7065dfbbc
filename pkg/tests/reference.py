"""Independent reference implementations used as test oracles.

Everything here is written naively (plain numpy, explicit loops where
that is clearer) and deliberately avoids calling the package's attention
or loss code paths, so that agreement between the two is evidence of
correctness rather than shared bugs.
"""

import numpy as np


# ---------------------------------------------------------------------------
# finite differences

def finite_difference_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        h = eps * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(np.asarray(a).ravel())
    nb = np.linalg.norm(np.asarray(b).ravel())
    denom = max(na, nb, 1e-12)
    return float(np.linalg.norm((np.asarray(a) - np.asarray(b)).ravel()) / denom)


# ---------------------------------------------------------------------------
# attention oracles

def rope_rotate(x: np.ndarray, lat: np.ndarray, lon: np.ndarray, theta: float) -> np.ndarray:
    """Apply 2D rotary embedding to [..., N, hd]: first half of the head dim
    rotates with longitude, second half with latitude, standard frequencies."""
    hd = x.shape[-1]
    half = hd // 2
    n_pairs = half // 2
    freqs = theta ** (-2.0 * np.arange(n_pairs) / half)
    angles = np.concatenate([lon[:, None] * freqs, lat[:, None] * freqs], axis=1)
    cos, sin = np.cos(angles), np.sin(angles)
    pairs = x.reshape(x.shape[:-1] + (half, 2))
    out = np.empty_like(pairs)
    out[..., 0] = pairs[..., 0] * cos - pairs[..., 1] * sin
    out[..., 1] = pairs[..., 0] * sin + pairs[..., 1] * cos
    return out.reshape(x.shape)


def project_qkv(x, w_q, w_k, w_v, num_heads, kv_heads, head_dim,
                positions=None, theta=10000.0):
    """Projections + RoPE + GQA expansion, all in plain numpy."""
    n = x.shape[0]
    q = (x @ w_q).reshape(n, num_heads, head_dim).transpose(1, 0, 2)
    k = (x @ w_k).reshape(n, kv_heads, head_dim).transpose(1, 0, 2)
    v = (x @ w_v).reshape(n, kv_heads, head_dim).transpose(1, 0, 2)
    if positions is not None:
        lat, lon = positions
        q = rope_rotate(q, lat, lon, theta)
        k = rope_rotate(k, lat, lon, theta)
    ratio = num_heads // kv_heads
    k = np.repeat(k, ratio, axis=0)
    v = np.repeat(v, ratio, axis=0)
    return q, k, v


def softmax_rows(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def dense_attention(q, k, v):
    """[H, N, hd] per-head full softmax attention."""
    hd = q.shape[-1]
    s = q @ np.swapaxes(k, -1, -2) / np.sqrt(hd)
    return softmax_rows(s) @ v


def masked_dense_attention(q, k, v, allow: np.ndarray):
    """Dense attention with a boolean [H, N, N] (or [N, N]) keep-mask."""
    hd = q.shape[-1]
    s = q @ np.swapaxes(k, -1, -2) / np.sqrt(hd)
    s = np.where(allow, s, -np.inf)
    w = softmax_rows(s)
    return w @ v


def block_select_mask(abar: np.ndarray, top_n: int, b: int, n: int) -> np.ndarray:
    """[H, N, N] keep-mask from per-query-block top-n selection of ``abar``.

    Ties break toward the lower block index, matching the contract.
    """
    h, m, _ = abar.shape
    mask = np.zeros((h, n, n), dtype=bool)
    for head in range(h):
        for qb in range(m):
            order = sorted(range(m), key=lambda j: (-abar[head, qb, j], j))
            for j in order[:top_n]:
                mask[head, qb * b:(qb + 1) * b, j * b:(j + 1) * b] = True
    return mask


def token_select_mask(a: np.ndarray, top_n: int, b: int) -> np.ndarray:
    """[H, N, N] keep-mask from per-token top-n block selection."""
    h, n, m = a.shape
    mask = np.zeros((h, n, n), dtype=bool)
    for head in range(h):
        for i in range(n):
            order = sorted(range(m), key=lambda j: (-a[head, i, j], j))
            for j in order[:top_n]:
                mask[head, i, j * b:(j + 1) * b] = True
    return mask


def compress_scores(q, k, b):
    """Per-query-block mean-pooled block attention scores [H, m, m]."""
    h, n, hd = q.shape
    m = n // b
    qb = q.reshape(h, m, b, hd).mean(axis=2)
    kb = k.reshape(h, m, b, hd).mean(axis=2)
    return softmax_rows(qb @ np.swapaxes(kb, -1, -2) / np.sqrt(hd))


def token_compress_scores(q, k, b):
    """Per-token scores against mean-pooled key blocks [H, N, m]."""
    h, n, hd = q.shape
    m = n // b
    kb = k.reshape(h, m, b, hd).mean(axis=2)
    return softmax_rows(q @ np.swapaxes(kb, -1, -2) / np.sqrt(hd))


# ---------------------------------------------------------------------------
# interpolation oracle

def interp_oracle(x_src, src_xyz, tgt_xyz, neighbors, w_q, w_k, w_v, w_o, eps=1e-6):
    """Loop-based cross-attention interpolation (Eq.-style, one target at a time)."""
    d = w_k.shape[1]
    out = np.zeros((len(tgt_xyz), w_o.shape[1]))
    norm = x_src / np.sqrt((x_src ** 2).mean(axis=1, keepdims=True) + eps)
    for i in range(len(tgt_xyz)):
        idx = neighbors[i]
        rel = tgt_xyz[i] - src_xyz[idx]
        lengths = np.linalg.norm(rel, axis=1, keepdims=True)
        unit = np.where(lengths > 0, rel / np.maximum(lengths, 1e-300), 0.0)
        scores = np.empty(len(idx))
        vals = np.empty((len(idx), d))
        for jj, j in enumerate(idx):
            qv = unit[jj] @ w_q
            kv = norm[j] @ w_k
            vals[jj] = norm[j] @ w_v
            scores[jj] = qv @ kv / np.sqrt(d)
        w = np.exp(scores - scores.max())
        w /= w.sum()
        out[i] = (w @ vals) @ w_o
    return out


# ---------------------------------------------------------------------------
# CRPS oracles

def crps_double_loop(ensemble: np.ndarray, truth: float) -> float:
    """Literal double-loop evaluation of the fair ensemble CRPS."""
    x = np.asarray(ensemble, dtype=np.float64)
    n = len(x)
    first = sum(abs(xi - truth) for xi in x) / n
    second = 0.0
    for a in x:
        for b in x:
            second += abs(a - b)
    return first - second / (2 * n * (n - 1))


def crps_gaussian(mu: float, sigma: float, y: float) -> float:
    """Closed-form CRPS of a normal predictive distribution."""
    from scipy.stats import norm
    z = (y - mu) / sigma
    return sigma * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z) - 1 / np.sqrt(np.pi))


# ---------------------------------------------------------------------------
# spherical-harmonic oracle

def sph_harm_field(n: int, m: int, lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    """Real-valued unit-power spherical harmonic sampled on a (lat, lon) grid.

    For m == 0 this is Y_n^0; for m > 0 it is sqrt(2) * Re(Y_n^m), which has
    the same total power as a single complex coefficient of magnitude 1.
    """
    from scipy.special import sph_harm_y
    theta = np.pi / 2 - lat  # colatitude
    th, ph = np.meshgrid(theta, lon, indexing="ij")
    y = sph_harm_y(n, abs(m), th, ph)
    if m == 0:
        return y.real
    return np.sqrt(2.0) * y.real
