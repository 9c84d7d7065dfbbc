"""Synthetic training data: rotating band-limited fields on the sphere.

Each dynamic channel is a spherical-harmonic expansion whose coefficients
follow an AR(1) process combined with solid-body rotation about the polar
axis: the next state is mostly a longitude shift of the current one, plus
fresh band-limited forcing. That gives dynamics that are learnable (the
rotation), stochastic (the forcing bounds achievable CRPS away from zero),
and spectrally clean (exactly zero power above the band limit).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diagnostics import legendre_normalized
from .model import ForecastState, grid_latlon, sinusoidal_time
from .msgt import read_msgt, write_msgt
from .training import NormStats


@dataclass(frozen=True)
class SynthConfig:
    grid_h: int = 32
    grid_w: int = 64
    channels: int = 3
    statics: int = 2
    steps: int = 96
    seed: int = 0
    band_limit: int = 6
    rotation: float = 2 * np.pi / 32     # radians of longitude per step
    persistence: float = 0.97            # AR(1) coefficient
    amplitude: float = 1.0
    steps_per_day: float = 8.0
    steps_per_year: float = 64.0


def _real_basis(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormal real harmonic basis on the grid plus each mode's (n, m)."""
    lat, lon = grid_latlon(cfg.grid_h, cfg.grid_w)
    x = np.sin(lat)
    p = legendre_normalized(cfg.band_limit, x)
    rows, degs, orders = [], [], []
    for n in range(1, cfg.band_limit + 1):
        for m in range(0, n + 1):
            radial = p[n, m][:, None]
            if m == 0:
                rows.append(np.broadcast_to(radial, (cfg.grid_h, cfg.grid_w)).ravel())
                degs.append(n), orders.append(0)
            else:
                c = np.cos(m * lon)[None, :]
                s = np.sin(m * lon)[None, :]
                rows.append((np.sqrt(2) * radial * c).ravel())
                degs.append(n), orders.append(m)
                rows.append((np.sqrt(2) * radial * s).ravel())
                degs.append(n), orders.append(-m)
    return np.array(rows), np.array(degs), np.array(orders)


def _rotate_coeffs(coef: np.ndarray, orders: np.ndarray, angle: float) -> np.ndarray:
    """Longitude shift: each (cos, sin) pair of order m rotates by m*angle."""
    out = coef.copy()
    for m in np.unique(np.abs(orders)):
        if m == 0:
            continue
        ic = np.where(orders == m)[0]
        isn = np.where(orders == -m)[0]
        ca, sa = np.cos(m * angle), np.sin(m * angle)
        c, s = coef[..., ic], coef[..., isn]
        out[..., ic] = ca * c + sa * s
        out[..., isn] = -sa * c + ca * s
    return out


@dataclass
class SyntheticDataset:
    cfg: SynthConfig
    fields: np.ndarray        # [steps, C, H, W] physical units
    statics: np.ndarray       # [S, H, W] normalized
    stats: NormStats          # per dynamic channel

    @property
    def n_steps(self) -> int:
        return self.fields.shape[0]

    def time_of(self, step: int) -> np.ndarray:
        return sinusoidal_time(step, self.cfg.steps_per_day, self.cfg.steps_per_year)

    def normalized(self, step: int) -> np.ndarray:
        return self.stats.normalize(self.fields[step])

    def state(self, step: int) -> ForecastState:
        return ForecastState(dynamic=self.normalized(step), static=self.statics,
                             time_embed=self.time_of(step), timestamp=float(step))

    def history(self, step: int, length: int) -> list[ForecastState]:
        """The ``length`` states ending at ``step`` inclusive."""
        if step - length + 1 < 0:
            raise IndexError(f"not enough history before step {step}")
        return [self.state(t) for t in range(step - length + 1, step + 1)]


def generate(cfg: SynthConfig) -> SyntheticDataset:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2024]))
    basis, degs, orders = _real_basis(cfg)
    n_modes = len(degs)
    mode_std = cfg.amplitude / (1.0 + degs) ** 1.5

    # stationary start, then rotate + AR(1) forcing each step
    coef = rng.standard_normal((cfg.channels, n_modes)) * mode_std
    offsets = 2.0 + np.arange(cfg.channels)[:, None, None]
    rho = cfg.persistence
    frames = []
    for _ in range(cfg.steps):
        frames.append((coef @ basis).reshape(cfg.channels, cfg.grid_h, cfg.grid_w)
                      + offsets)
        coef = rho * _rotate_coeffs(coef, orders, cfg.rotation) \
            + np.sqrt(1 - rho ** 2) * rng.standard_normal(coef.shape) * mode_std
    fields = np.stack(frames)

    stats = NormStats(cfg.channels)
    for t in range(cfg.steps):
        stats.update(fields[t])

    raw_static = (rng.standard_normal((cfg.statics, n_modes)) * mode_std) @ basis
    raw_static = raw_static.reshape(cfg.statics, cfg.grid_h, cfg.grid_w)
    mu = raw_static.mean(axis=(1, 2), keepdims=True)
    sd = raw_static.std(axis=(1, 2), keepdims=True)
    statics = (raw_static - mu) / np.maximum(sd, 1e-12)

    return SyntheticDataset(cfg=cfg, fields=fields, statics=statics, stats=stats)


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json + MSGT files

def save_dataset(ds: SyntheticDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = asdict(ds.cfg)
    manifest["format"] = "sphere-bsa-dataset-v1"
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    write_msgt(directory / "stats.msgt", ds.stats.to_arrays())
    write_msgt(directory / "static.msgt", ds.statics.astype(np.float32))
    for t in range(ds.n_steps):
        write_msgt(directory / f"state_{t:05d}.msgt", ds.fields[t].astype(np.float32))


def load_dataset(directory) -> SyntheticDataset:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    manifest.pop("format", None)
    cfg = SynthConfig(**manifest)
    stats = NormStats.from_arrays(read_msgt(directory / "stats.msgt"))
    statics = read_msgt(directory / "static.msgt").astype(np.float64)
    fields = np.stack([read_msgt(directory / f"state_{t:05d}.msgt").astype(np.float64)
                       for t in range(cfg.steps)])
    return SyntheticDataset(cfg=cfg, fields=fields, statics=statics, stats=stats)
