"""Ensemble training: fair CRPS loss, Muon optimizer, rollout finetuning.

The loss is the latitude- and variable-weighted fair CRPS of a small
training ensemble (two members by default), computed in standardized
space. Matrix gradients are orthogonalized with Newton-Schulz iterations
before the momentum update; rollout finetuning backpropagates only the
final step so memory stays flat in the rollout length.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ForecastState, Model
from .tensor import Tensor


class EnsembleSizeError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# normalization

class NormStats:
    """Per-channel mean/std accumulated with Welford's online algorithm.

    Every spatial position of every timestep counts as one observation.
    """

    def __init__(self, channels: int):
        self.channels = channels
        self.count = 0
        self._mean = np.zeros(channels, dtype=np.float64)
        self._m2 = np.zeros(channels, dtype=np.float64)

    def update(self, x: np.ndarray) -> None:
        """Fold in one [C, ...] field (batched Welford merge)."""
        flat = np.asarray(x, dtype=np.float64).reshape(self.channels, -1)
        nb = flat.shape[1]
        mb = flat.mean(axis=1)
        m2b = ((flat - mb[:, None]) ** 2).sum(axis=1)
        delta = mb - self._mean
        total = self.count + nb
        self._mean += delta * nb / total
        self._m2 += m2b + delta ** 2 * self.count * nb / total
        self.count = total

    @property
    def mean(self) -> np.ndarray:
        return self._mean

    @property
    def std(self) -> np.ndarray:
        if self.count == 0:
            raise NumericFailure("no observations accumulated")
        std = np.sqrt(self._m2 / self.count)
        if np.any(std <= 0):
            raise NumericFailure("degenerate channel with zero variance")
        return std

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """(x - mean) / std channelwise; exact inverse of denormalize."""
        shape = (self.channels,) + (1,) * (np.ndim(x) - 1)
        return (x - self.mean.reshape(shape)) / self.std.reshape(shape)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        shape = (self.channels,) + (1,) * (np.ndim(x) - 1)
        return x * self.std.reshape(shape) + self.mean.reshape(shape)

    def to_arrays(self) -> np.ndarray:
        return np.stack([self.mean, self.std])

    @classmethod
    def from_arrays(cls, arr: np.ndarray, count: int = 1) -> "NormStats":
        stats = cls(arr.shape[1])
        stats.count = count
        stats._mean = arr[0].astype(np.float64)
        stats._m2 = (arr[1].astype(np.float64) ** 2) * count
        return stats


# ---------------------------------------------------------------------------
# loss weights

PRESSURE_MEAN_HPA = 463.46  # mean of the 13 standard levels


def pressure_level_alpha(p_hpa: float) -> float:
    """Channel weight proportional to pressure level, normalized by the mean."""
    return p_hpa / PRESSURE_MEAN_HPA


def latitude_weights(lat: np.ndarray) -> np.ndarray:
    """cos(lat) scaled so the weights average to exactly one."""
    w = np.cos(np.asarray(lat, dtype=np.float64))
    return w / w.mean()


@dataclass
class LossWeights:
    alpha: np.ndarray  # [C]
    omega: np.ndarray  # [H], mean exactly 1

    @classmethod
    def uniform(cls, channels: int, lat: np.ndarray) -> "LossWeights":
        return cls(alpha=np.ones(channels), omega=latitude_weights(lat))

    def validate(self, c: int, h: int) -> None:
        if len(self.alpha) != c or len(self.omega) != h:
            raise ValueError(
                f"weights ({len(self.alpha)}, {len(self.omega)}) do not match field ({c}, {h})")


# ---------------------------------------------------------------------------
# fair CRPS

def fair_crps(ensemble: Tensor, truth: Tensor) -> Tensor:
    """Pointwise unbiased ensemble CRPS (members along axis 0).

    mean_n |x_n - y|  -  (1 / 2N(N-1)) sum_{n,n'} |x_n - x_n'|;
    the pairwise term makes the estimator fair for finite ensembles.
    """
    n = ensemble.shape[0]
    if n < 2:
        raise EnsembleSizeError("fair CRPS needs at least 2 members")
    first = T.tabs(T.sub(ensemble, truth.reshape((1,) + truth.shape))).mean(axis=0)
    pair_sum = None
    for i in range(n):
        xi = T.slice_axis(ensemble, 0, i, i + 1)
        for j in range(i + 1, n):
            xj = T.slice_axis(ensemble, 0, j, j + 1)
            term = T.tabs(T.sub(xi, xj))
            pair_sum = term if pair_sum is None else T.add(pair_sum, term)
    # ordered pairs double the i<j sum; the 2N(N-1) denominator halves it back
    second = T.scale(pair_sum.reshape(truth.shape), 1.0 / (n * (n - 1)))
    return T.sub(first, second)


def fair_crps_np(ensemble: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Vectorized numpy version for evaluation (no gradients)."""
    x = np.asarray(ensemble)
    n = x.shape[0]
    if n < 2:
        raise EnsembleSizeError("fair CRPS needs at least 2 members")
    first = np.abs(x - truth[None]).mean(axis=0)
    second = np.abs(x[:, None] - x[None, :]).sum(axis=(0, 1)) / (2 * n * (n - 1))
    return first - second


def weighted_loss(prediction_ensemble: Tensor, target: Tensor,
                  weights: LossWeights) -> Tensor:
    """Mean over channels and grid of alpha_i * omega_h * CRPS.

    Inputs live in standardized space; predictions are [N, C, H, W] and the
    target [C, H, W]. Gradients flow to every member.
    """
    _, c, h, w = prediction_ensemble.shape
    weights.validate(c, h)
    crps = fair_crps(prediction_ensemble, target)  # [C, H, W]
    factor = (weights.alpha[:, None, None] * weights.omega[None, :, None])
    scaled = T.mul(crps, Tensor(np.broadcast_to(factor, (c, h, w)).astype(crps.dtype)))
    return scaled.mean()


# ---------------------------------------------------------------------------
# Newton-Schulz orthogonalization

_CONVERGENT = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0)
# published fast coefficients: loose singular band, not a convergent scheme
_MUON_FAST = (3.4445, -4.7750, 2.0315)


def _spectral_norm_estimate(g: np.ndarray, iters: int = 30) -> float:
    """Power iteration on G^T G; deterministic start vector."""
    v = np.ones(g.shape[1]) / math.sqrt(g.shape[1])
    for _ in range(iters):
        u = g @ v
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0
        v = g.T @ (u / nu)
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        v /= nv
    return float(np.linalg.norm(g @ v))


def newton_schulz_orthogonalize(g: np.ndarray, steps: int = 5,
                                coeffs: str = "convergent") -> np.ndarray:
    """Polynomial iteration toward the nearest semi-orthogonal matrix.

    The default convergent quintic (15x - 10x^3 + 3x^5)/8 has fixed point
    exactly 1 and drives singular values to 1 (orthogonal inputs are exact
    fixed points). The "muon_fast" preset uses the published accelerated
    coefficients, which land singular values in a loose [0.7, 1.3] band.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("newton_schulz_orthogonalize expects a matrix")
    fro = float(np.linalg.norm(g))
    if fro == 0.0:
        return np.zeros_like(g)
    if coeffs == "muon_fast":
        a, b, c = _MUON_FAST
        x = g / fro
    elif coeffs == "convergent":
        a, b, c = _CONVERGENT
        # spectral pre-scaling converges far faster than Frobenius scaling;
        # the 1.02 margin keeps sigma below the quintic's basin edge (~1.53)
        sigma = _spectral_norm_estimate(g)
        x = g / max(sigma * 1.02, 1e-300)
    else:
        raise ValueError(f"unknown coefficient preset {coeffs!r}")
    transposed = g.shape[0] > g.shape[1]
    if transposed:
        x = x.T
    for _ in range(steps):
        xxt = x @ x.T
        x = a * x + (b * xxt + c * xxt @ xxt) @ x
    return x.T if transposed else x


# ---------------------------------------------------------------------------
# Muon optimizer

@dataclass
class MuonState:
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    beta: float = 0.95
    nesterov: bool = True
    ns_steps: int = 5
    step_count: int = 0


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> float:
    """Scale all gradients so the global norm is at most ``max_norm``."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


def muon_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: MuonState, lr: float, weight_decay: float = 0.0) -> None:
    """Momentum + Newton-Schulz update; non-matrix params take plain momentum."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        buf = state.momentum.get(name)
        if buf is None:
            buf = np.zeros_like(g, dtype=np.float64)
        g = g.astype(np.float64)
        buf = buf + (1.0 - state.beta) * (g - buf)
        state.momentum[name] = buf
        eff = g + state.beta * (buf - g) if state.nesterov else buf
        if p.data.ndim == 2:
            update = newton_schulz_orthogonalize(eff, state.ns_steps)
            update = update * math.sqrt(max(1.0, eff.shape[0] / eff.shape[1]))
        else:
            update = eff
        new = p.data.astype(np.float64)
        if weight_decay:
            new = new * (1.0 - lr * weight_decay)
        p.assign((new - lr * update).astype(p.data.dtype))
    state.step_count += 1


def cosine_lr(step: int, total: int, lr0: float, lr_end: float,
              warmup: int = 0) -> float:
    """Cosine decay lr0 -> lr_end with an optional linear warmup."""
    if warmup > 0 and step < warmup:
        return lr0 * (1e-6 + (1.0 - 1e-6) * step / warmup)
    span = max(1, total - warmup)
    frac = min(1.0, max(0.0, (step - warmup) / span))
    return lr_end + 0.5 * (lr0 - lr_end) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# training steps

@dataclass
class StepStats:
    loss: float
    grad_norm: float
    lr: float
    tape_nodes: int


def _advance_history(history: list[ForecastState], prediction: np.ndarray,
                     time_embed: np.ndarray) -> list[ForecastState]:
    last = history[-1]
    nxt = ForecastState(dynamic=prediction, static=last.static,
                        time_embed=time_embed, timestamp=last.timestamp + 1)
    return history[1:] + [nxt]


def train_step(model: Model, params: dict[str, Tensor], opt: MuonState,
               history: list[ForecastState], target: np.ndarray,
               target_time: np.ndarray, weights: LossWeights, lr: float,
               rng: np.random.Generator, n_members: int = 2,
               weight_decay: float = 0.0, clip: float = 1.0) -> StepStats:
    """One optimizer step on a single-step prediction ensemble."""
    z = rng.standard_normal((n_members, model.cfg.noise_dim))
    with T.GradTape() as tape:
        preds = model.forward(params, history, target_time, z)
        loss = weighted_loss(preds, Tensor(target.astype(model.cfg.np_dtype)), weights)
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        raise NumericFailure(f"non-finite loss {loss_val} at step {opt.step_count}")
    g = tape.backward(loss)
    grads = {name: g.of(p) for name, p in params.items()}
    norm = clip_grads(grads, clip)
    muon_step(params, grads, opt, lr, weight_decay)
    return StepStats(loss=loss_val, grad_norm=norm, lr=lr, tape_nodes=tape.node_count)


def rollout_finetune_step(model: Model, params: dict[str, Tensor], opt: MuonState,
                          history: list[ForecastState], targets: list[np.ndarray],
                          time_of: callable, start_step: int, weights: LossWeights,
                          lr: float, rng: np.random.Generator, k: int,
                          n_members: int = 2, weight_decay: float = 0.0,
                          clip: float = 1.0) -> StepStats:
    """Autoregressive finetuning: only the k-th step is backpropagated.

    The first k-1 steps run without a tape (values identical to the
    recorded path), so peak tape size does not depend on k.
    """
    if k < 1:
        raise ValueError("rollout length must be >= 1")
    if len(targets) < k:
        raise ValueError(f"need {k} targets, got {len(targets)}")
    if k == 1:
        return train_step(model, params, opt, history, targets[0],
                          time_of(start_step + 1), weights, lr, rng,
                          n_members, weight_decay, clip)

    member_histories = [list(history) for _ in range(n_members)]
    for step in range(1, k):
        t_embed = time_of(start_step + step)
        for m in range(n_members):
            z = rng.standard_normal((1, model.cfg.noise_dim))
            pred = model.forward(params, member_histories[m], t_embed, z)
            member_histories[m] = _advance_history(
                member_histories[m], np.asarray(pred.data[0]), t_embed)

    t_embed = time_of(start_step + k)
    target = Tensor(targets[k - 1].astype(model.cfg.np_dtype))
    with T.GradTape() as tape:
        preds = []
        for m in range(n_members):
            z = rng.standard_normal((1, model.cfg.noise_dim))
            preds.append(model.forward(params, member_histories[m], t_embed, z))
        ens = T.concat(preds, axis=0)
        loss = weighted_loss(ens, target, weights)
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        raise NumericFailure(f"non-finite loss {loss_val} in rollout step")
    g = tape.backward(loss)
    grads = {name: g.of(p) for name, p in params.items()}
    norm = clip_grads(grads, clip)
    muon_step(params, grads, opt, lr, weight_decay)
    return StepStats(loss=loss_val, grad_norm=norm, lr=lr, tape_nodes=tape.node_count)


# ---------------------------------------------------------------------------
# ensemble generation

@dataclass
class EnsembleForecast:
    """Member-indexed trajectories sharing one initial condition.

    ``members[m][s]`` is the [C, H, W] normalized prediction of member m at
    lead step s+1.
    """

    members: list[list[np.ndarray]]
    start_step: int

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def n_steps(self) -> int:
        return len(self.members[0])

    def as_array(self) -> np.ndarray:
        """[members, steps, C, H, W]."""
        return np.stack([np.stack(m) for m in self.members])


def member_noise(seed: int, member: int, step: int, dim: int) -> np.ndarray:
    """Deterministic z for (seed, member, step); fresh draw each step."""
    ss = np.random.SeedSequence([seed, member, step])
    return np.random.default_rng(ss).standard_normal((1, dim))


def generate_ensemble(model: Model, params: dict[str, Tensor],
                      history: list[ForecastState], n_members: int, steps: int,
                      time_of: callable, start_step: int = 0, seed: int = 0,
                      max_workers: int | None = None) -> EnsembleForecast:
    """Autoregressive sampling: members share the initial condition and
    diverge at the first step through independently sampled noise."""
    if n_members < 1:
        raise EnsembleSizeError("need at least one member")

    def run_member(m: int) -> list[np.ndarray]:
        hist = list(history)
        out = []
        for s in range(1, steps + 1):
            t_embed = time_of(start_step + s)
            z = member_noise(seed, m, s, model.cfg.noise_dim)
            pred = np.asarray(model.forward(params, hist, t_embed, z).data[0])
            out.append(pred)
            hist = _advance_history(hist, pred, t_embed)
        return out

    if max_workers and max_workers > 1 and n_members > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            members = list(pool.map(run_member, range(n_members)))
    else:
        members = [run_member(m) for m in range(n_members)]
    return EnsembleForecast(members=members, start_step=start_step)
