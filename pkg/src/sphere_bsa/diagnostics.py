"""Evaluation battery: weighted metrics, spherical spectra, aliasing probes.

The spherical-harmonic analysis runs directly on the equiangular grid:
a longitudinal FFT per latitude ring followed by normalized associated
Legendre quadrature in latitude (Fejer weights, exact for band-limited
integrands at the grid's resolution). No fast transform; desk-scale sizes
make direct summation trivial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .healpix import build_mesh, latlon_to_xyz
from .model import grid_latlon
from .training import fair_crps_np, latitude_weights


# ---------------------------------------------------------------------------
# weighted metrics

def latitude_weighted_mean(field: np.ndarray, lat: np.ndarray) -> float:
    """Area-weighted (cosine-latitude) global mean of one [H, W] field."""
    w = latitude_weights(lat)
    return float((field * w[:, None]).mean())


def latitude_weighted_rmse(pred: np.ndarray, truth: np.ndarray,
                           lat: np.ndarray) -> float:
    """sqrt of the cosine-latitude-weighted mean squared error."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"grid mismatch {pred.shape} vs {truth.shape}")
    w = latitude_weights(lat)
    return float(np.sqrt(((pred - truth) ** 2 * w[:, None]).mean()))


def gmsp_drift(trajectory: np.ndarray, initial: np.ndarray,
               lat: np.ndarray) -> np.ndarray:
    """Area-weighted global mean at each lead minus the initial value.

    ``trajectory`` is [L, H, W] for one pressure-like channel.
    """
    base = latitude_weighted_mean(initial, lat)
    return np.array([latitude_weighted_mean(f, lat) - base for f in trajectory])


# ---------------------------------------------------------------------------
# spherical power spectra

def legendre_normalized(n_max: int, x: np.ndarray) -> np.ndarray:
    """Fully normalized associated Legendre functions, [n, m, len(x)].

    Normalization is orthonormal over the sphere (the spherical-harmonic
    convention with Condon-Shortley phase): integral of (P_n^m)^2 over
    x in [-1, 1] times 2*pi equals 1 for m = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    p = np.zeros((n_max + 1, n_max + 1, len(x)))
    p[0, 0] = 1.0 / np.sqrt(4 * np.pi)
    for m in range(1, n_max + 1):
        p[m, m] = -np.sqrt((2 * m + 1) / (2.0 * m)) * s * p[m - 1, m - 1]
    for m in range(n_max):
        p[m + 1, m] = np.sqrt(2 * m + 3.0) * x * p[m, m]
    for m in range(n_max + 1):
        for n in range(m + 2, n_max + 1):
            a = np.sqrt((4.0 * n * n - 1) / (n * n - m * m))
            b = np.sqrt(((n - 1.0) ** 2 - m * m) / (4.0 * (n - 1.0) ** 2 - 1))
            p[n, m] = a * (x * p[n - 1, m] - b * p[n - 2, m])
    return p


def fejer_weights(h: int) -> np.ndarray:
    """Fejer-1 quadrature weights for colatitude midpoints (j+1/2)*pi/H.

    Exact for trigonometric polynomials in theta up to degree H-1, which
    covers products of harmonics up to degree (H-1)/2.
    """
    j = np.arange(h)
    theta = (j + 0.5) * np.pi / h
    k = np.arange(1, h // 2 + 1)
    terms = np.cos(2 * np.outer(theta, k)) / (4 * k * k - 1)
    return (2.0 / h) * (1.0 - 2.0 * terms.sum(axis=1))


@dataclass
class PowerSpectrum:
    """Per-degree power; total equals the area-weighted mean square field."""

    power: np.ndarray  # [n_max + 1]

    @property
    def n_max(self) -> int:
        return len(self.power) - 1

    @property
    def degrees(self) -> np.ndarray:
        return np.arange(len(self.power))

    @property
    def total(self) -> float:
        return float(self.power.sum())


def spherical_power_spectrum(field: np.ndarray, n_max: int,
                             lat: np.ndarray | None = None) -> PowerSpectrum:
    """Analysis of one [H, W] equiangular field into per-degree power C_n.

    Longitude is handled by an exact DFT; latitude by Fejer quadrature at
    the ring midpoints. C_n sums |a_nm|^2 over m and is scaled by 1/(4*pi)
    so that sum_n C_n equals the area-weighted mean of field^2.
    """
    field = np.asarray(field, dtype=np.float64)
    h, w = field.shape
    if n_max > min(h, w // 2) - 1:
        raise ValueError(f"n_max {n_max} too large for a {h}x{w} grid")
    if lat is None:
        lat = grid_latlon(h, w)[0]
    x = np.sin(np.asarray(lat))          # cos(colatitude)
    weights = fejer_weights(h)           # symmetric in theta, row order free

    fm = np.fft.rfft(field, axis=1) * (2 * np.pi / w)   # [H, W//2+1]
    p = legendre_normalized(n_max, x)                   # [n, m, H]
    wf = fm * weights[:, None]
    power = np.zeros(n_max + 1)
    for n in range(n_max + 1):
        a_n0 = (p[n, 0] * wf[:, 0].real).sum() + 1j * (p[n, 0] * wf[:, 0].imag).sum()
        c = abs(a_n0) ** 2
        for m in range(1, n + 1):
            a_nm = (p[n, m] * wf[:, m]).sum()
            c += 2 * abs(a_nm) ** 2
        power[n] = c / (4 * np.pi)
    return PowerSpectrum(power=power)


def spectral_ratio(model_fields, reference_fields, n_max: int,
                   lat: np.ndarray | None = None) -> np.ndarray:
    """Per-degree ratio of mean model power to mean reference power.

    Fields aggregate by averaging spectra first, then dividing; degrees
    with zero reference power are reported as NaN (missing).
    """
    def mean_spec(fields):
        specs = [spherical_power_spectrum(f, n_max, lat).power for f in fields]
        return np.mean(specs, axis=0)

    num = mean_spec(model_fields)
    den = mean_spec(reference_fields)
    out = np.full(n_max + 1, np.nan)
    nz = den != 0
    out[nz] = num[nz] / den[nz]
    return out


def effective_resolution(ratio: np.ndarray, threshold: float = 0.1) -> int:
    """Largest degree n with the ratio inside [1-tau, 1+tau] for all m <= n.

    Degree 0 is ignored; a ratio that deviates already at degree 1 gives 0.
    """
    n_max = len(ratio) - 1
    best = 0
    for n in range(1, n_max + 1):
        r = ratio[n]
        if not np.isfinite(r) or abs(r - 1.0) > threshold:
            break
        best = n
    return best


# ---------------------------------------------------------------------------
# aliasing probe

def _idw_matrix(src_xyz: np.ndarray, dst_xyz: np.ndarray, k: int = 4) -> tuple:
    """Inverse-distance weights of the k nearest sources per target."""
    from .healpix import _knn_points
    idx = _knn_points(src_xyz, dst_xyz, k)
    diff = dst_xyz[:, None, :] - src_xyz[idx]
    d = np.linalg.norm(diff, axis=-1)
    w = 1.0 / np.maximum(d, 1e-9)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


_NONLINEARITIES = {
    "identity": lambda v: v,
    "square": lambda v: v * v,
    "relu": lambda v: np.maximum(v, 0.0),
}


def aliasing_demo(signal: np.ndarray, native_nside: int, coarse_nside: int,
                  nonlinearity="square", n_max: int | None = None,
                  lat: np.ndarray | None = None) -> dict:
    """Spectral ratios of a roundtrip through a native vs a coarse mesh.

    Both pipelines interpolate the grid signal onto a mesh (fixed
    inverse-distance weights), apply the same pointwise nonlinearity, and
    interpolate back. Energy above the coarse mesh's resolvable band folds
    onto other degrees there; the native mesh represents it faithfully.
    Returns the two ratio curves against the input spectrum.
    """
    fn = _NONLINEARITIES[nonlinearity] if isinstance(nonlinearity, str) else nonlinearity
    h, w = signal.shape
    if n_max is None:
        n_max = min(h, w // 2) - 1
    if lat is None:
        lat = grid_latlon(h, w)[0]
    lon = grid_latlon(h, w)[1]
    lat2, lon2 = np.meshgrid(lat, lon, indexing="ij")
    grid_xyz = latlon_to_xyz(lat2.ravel(), lon2.ravel())

    def pipeline(nside: int) -> np.ndarray:
        mesh = build_mesh(nside)
        up_idx, up_w = _idw_matrix(grid_xyz, mesh.xyz)
        down_idx, down_w = _idw_matrix(mesh.xyz, grid_xyz)
        on_mesh = (signal.ravel()[up_idx] * up_w).sum(axis=1)
        mixed = fn(on_mesh)
        back = (mixed[down_idx] * down_w).sum(axis=1)
        return back.reshape(h, w)

    base = spherical_power_spectrum(signal, n_max, lat).power
    # degrees carrying only roundoff power have no meaningful ratio
    defined = base > 1e-12 * base.max()
    out = {}
    for name, nside in (("native", native_nside), ("coarse", coarse_nside)):
        spec = spherical_power_spectrum(pipeline(nside), n_max, lat).power
        ratio = np.full(n_max + 1, np.nan)
        ratio[defined] = spec[defined] / base[defined]
        out[name] = ratio
        out[name + "_power"] = spec
    out["input_power"] = base
    return out


# ---------------------------------------------------------------------------
# ensemble metrics

@dataclass
class MetricReport:
    """Per-channel, per-lead scores; arrays are [leads, channels]."""

    rmse: np.ndarray
    nrmse: np.ndarray
    crps: np.ndarray
    spread: np.ndarray
    ssr: np.ndarray

    def rows(self):
        leads, channels = self.rmse.shape
        for lead in range(leads):
            for ch in range(channels):
                yield {"lead": lead + 1, "channel": ch,
                       "rmse": self.rmse[lead, ch], "nrmse": self.nrmse[lead, ch],
                       "crps": self.crps[lead, ch], "spread": self.spread[lead, ch],
                       "ssr": self.ssr[lead, ch]}


def ensemble_metrics(forecast: np.ndarray, truth: np.ndarray, lat: np.ndarray,
                     climatology_std: np.ndarray | None = None) -> MetricReport:
    """Scores for a [members, leads, C, H, W] forecast against [leads, C, H, W].

    Spread is the per-point unbiased std over members, then area-averaged;
    SSR divides it by the ensemble-mean RMSE. nRMSE divides RMSE by the
    climatological standard deviation when given.
    """
    forecast = np.asarray(forecast)
    truth = np.asarray(truth)
    m, leads, c, h, w = forecast.shape
    if m < 2:
        raise ValueError("ensemble metrics need at least 2 members")
    if truth.shape != (leads, c, h, w):
        raise ValueError(f"truth shape {truth.shape} mismatches forecast")
    wlat = latitude_weights(lat)

    rmse = np.zeros((leads, c))
    crps = np.zeros((leads, c))
    spread = np.zeros((leads, c))
    for t in range(leads):
        for ch in range(c):
            ens = forecast[:, t, ch]
            tru = truth[t, ch]
            rmse[t, ch] = latitude_weighted_rmse(ens.mean(axis=0), tru, lat)
            crps[t, ch] = float((fair_crps_np(ens, tru) * wlat[:, None]).mean())
            spread[t, ch] = float((ens.std(axis=0, ddof=1) * wlat[:, None]).mean())
    with np.errstate(divide="ignore", invalid="ignore"):
        ssr = np.where(rmse > 0, spread / rmse, np.nan)
        if climatology_std is None:
            nrmse = np.full_like(rmse, np.nan)
        else:
            nrmse = rmse / np.asarray(climatology_std)[None, :]
    return MetricReport(rmse=rmse, nrmse=nrmse, crps=crps, spread=spread, ssr=ssr)
