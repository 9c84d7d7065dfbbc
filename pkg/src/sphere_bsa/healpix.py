"""HEALPix tessellation in the NESTED scheme.

Pixel centers follow the standard construction: face decomposition, Morton
bit-deinterleaving within a face, then the ring coordinates of the Gorski
construction. Children of pixel ``p`` are ``4p..4p+3`` one level finer,
which makes spatially close pixels contiguous in index space and lets
block-sparse attention address blocks as index ranges.

All angles are radians; ``lat`` is geographic latitude in [-pi/2, pi/2],
``lon`` is longitude in [0, 2pi).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree


class ConfigError(ValueError):
    pass


# ring offsets per base face (north index and azimuth, units of nside / pi/4)
_JRLL = np.array([2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4], dtype=np.int64)
_JPLL = np.array([1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7], dtype=np.int64)


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=4)
def _spread_table(bits: int = 16) -> np.ndarray:
    """Table spreading the low ``bits`` of an int into even bit positions."""
    vals = np.arange(1 << bits, dtype=np.int64)
    spread = np.zeros(1 << bits, dtype=np.int64)
    for b in range(bits):
        spread |= ((vals >> b) & 1) << (2 * b)
    return spread


def _interleave(ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    spread = _spread_table()
    return spread[ix & 0xFFFF] | (spread[iy & 0xFFFF] << 1)


def _deinterleave(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ix = np.zeros_like(p)
    iy = np.zeros_like(p)
    for b in range(32):
        ix |= ((p >> (2 * b)) & 1) << b
        iy |= ((p >> (2 * b + 1)) & 1) << b
    return ix, iy


def pix2ang(nside: int, pix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """NESTED pixel index -> (lat, lon) of the pixel center."""
    _check_nside(nside)
    pix = np.asarray(pix, dtype=np.int64)
    npface = nside * nside
    face = pix // npface
    ix, iy = _deinterleave(pix % npface)

    jr = _JRLL[face] * nside - ix - iy - 1  # ring index, 1..4*nside-1
    nr = np.full_like(jr, nside)
    z = np.empty(jr.shape, dtype=np.float64)
    kshift = np.zeros_like(jr)

    north = jr < nside
    south = jr > 3 * nside
    eq = ~(north | south)

    nr[north] = jr[north]
    z[north] = 1.0 - (nr[north] ** 2) / (3.0 * npface)
    nr[south] = 4 * nside - jr[south]
    z[south] = (nr[south] ** 2) / (3.0 * npface) - 1.0
    z[eq] = (2 * nside - jr[eq]) * 2.0 / (3.0 * nside)
    kshift[eq] = (jr[eq] - nside) & 1

    jp = (_JPLL[face] * nr + ix - iy + 1 + kshift) // 2
    jp = np.where(jp > 4 * nr, jp - 4 * nr, jp)
    jp = np.where(jp < 1, jp + 4 * nr, jp)

    lon = (jp - (kshift + 1) * 0.5) * (np.pi / 2) / nr
    lat = np.arcsin(np.clip(z, -1.0, 1.0))
    return lat, np.mod(lon, 2 * np.pi)


def ang2pix(nside: int, lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    """Direction (lat, lon) -> NESTED index of the containing pixel."""
    _check_nside(nside)
    scalar = np.isscalar(lat) or (np.ndim(lat) == 0 and np.ndim(lon) == 0)
    lat = np.clip(np.atleast_1d(np.asarray(lat, dtype=np.float64)), -np.pi / 2, np.pi / 2)
    lon = np.mod(np.atleast_1d(np.asarray(lon, dtype=np.float64)), 2 * np.pi)
    z = np.sin(lat)
    za = np.abs(z)
    tt = np.mod(lon * (2.0 / np.pi), 4.0)

    ix = np.empty(z.shape, dtype=np.int64)
    iy = np.empty(z.shape, dtype=np.int64)
    face = np.empty(z.shape, dtype=np.int64)

    eq = za <= 2.0 / 3.0
    if np.any(eq):
        temp1 = nside * (0.5 + tt[eq])
        temp2 = nside * (z[eq] * 0.75)
        jp = (temp1 - temp2).astype(np.int64)  # ascending edge line
        jm = (temp1 + temp2).astype(np.int64)  # descending edge line
        ifp = jp // nside
        ifm = jm // nside
        f = np.where(ifp == ifm, np.where(ifp == 4, 4, ifp + 4),
                     np.where(ifp < ifm, ifp, ifm + 8))
        face[eq] = f
        ix[eq] = jm & (nside - 1)
        iy[eq] = nside - (jp & (nside - 1)) - 1

    pole = ~eq
    if np.any(pole):
        tt_p = tt[pole]
        ntt = np.minimum(tt_p.astype(np.int64), 3)
        tp = tt_p - ntt
        tmp = nside * np.sqrt(3.0 * (1.0 - za[pole]))
        jp = np.minimum((tp * tmp).astype(np.int64), nside - 1)
        jm = np.minimum(((1.0 - tp) * tmp).astype(np.int64), nside - 1)
        north = z[pole] >= 0
        face[pole] = np.where(north, ntt, ntt + 8)
        ix[pole] = np.where(north, nside - jm - 1, jp)
        iy[pole] = np.where(north, nside - jp - 1, jm)

    pix = face * (nside * nside) + _interleave(ix, iy)
    return int(pix[0]) if scalar else pix


def children(p: int, nside: int) -> tuple[int, int, int, int]:
    """Indices of the four children of ``p`` at resolution ``2*nside``."""
    if not 0 <= p < 12 * nside * nside:
        raise ConfigError(f"pixel {p} out of range for nside {nside}")
    return (4 * p, 4 * p + 1, 4 * p + 2, 4 * p + 3)


def parent(p: int, nside: int) -> int:
    """Index of the parent of ``p`` at resolution ``nside/2``."""
    if nside < 2 or not 0 <= p < 12 * nside * nside:
        raise ConfigError(f"pixel {p} out of range for nside {nside}")
    return p // 4


def _check_nside(nside: int) -> None:
    if not isinstance(nside, (int, np.integer)) or not _is_power_of_two(int(nside)) or nside > 1024:
        raise ConfigError(f"nside must be a power of two in [1, 1024], got {nside!r}")


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous partition of NESTED indices into npix/b blocks of size b."""

    npix: int
    block_size: int

    def __post_init__(self):
        if self.block_size < 1 or self.npix % self.block_size != 0:
            raise ConfigError(
                f"block size {self.block_size} does not divide npix {self.npix}")

    @property
    def num_blocks(self) -> int:
        return self.npix // self.block_size

    def block_range(self, i: int) -> tuple[int, int]:
        if not 0 <= i < self.num_blocks:
            raise ConfigError(f"block {i} out of range")
        return i * self.block_size, (i + 1) * self.block_size


class HealpixMesh:
    """Immutable tessellation at a given nside.

    Centers are computed once at construction and cached; every query is
    read-only, so meshes are safe to share across threads.
    """

    def __init__(self, nside: int):
        _check_nside(nside)
        self.nside = int(nside)
        self.npix = 12 * self.nside * self.nside
        lat, lon = pix2ang(self.nside, np.arange(self.npix))
        self.lat = lat
        self.lon = lon
        self.xyz = latlon_to_xyz(lat, lon)
        self._tree = None

    @property
    def pixel_area(self) -> float:
        return 4.0 * np.pi / self.npix

    @property
    def resolution_rad(self) -> float:
        """Approximate angular size of one pixel (sqrt of its area)."""
        return float(np.sqrt(self.pixel_area))

    def partition(self, block_size: int) -> BlockPartition:
        return BlockPartition(self.npix, block_size)

    def ang2pix(self, lat, lon) -> np.ndarray:
        return ang2pix(self.nside, lat, lon)

    def children_of(self, p: int) -> tuple[int, int, int, int]:
        return children(p, self.nside)

    def parent_of(self, p: int) -> int:
        return parent(p, self.nside)

    def _kdtree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.xyz)
        return self._tree

    def __repr__(self):
        return f"HealpixMesh(nside={self.nside}, npix={self.npix})"


def build_mesh(nside: int) -> HealpixMesh:
    return HealpixMesh(nside)


def latlon_to_xyz(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    cl = np.cos(lat)
    return np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1)


def _knn_points(src_xyz: np.ndarray, dst_xyz: np.ndarray, k: int) -> np.ndarray:
    """For each dst point the k nearest src points by great-circle distance.

    Chord distance on the unit sphere is monotone in great-circle distance,
    so a Euclidean KD-tree gives the right neighbors; ties are re-broken
    deterministically by smaller source index.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > len(src_xyz):
        raise ConfigError(f"k={k} exceeds source size {len(src_xyz)}")
    tree = cKDTree(src_xyz)
    probe = min(len(src_xyz), k + 8)  # slack so boundary ties can be reordered
    _, idx = tree.query(dst_xyz, k=probe)
    idx = np.atleast_2d(idx)
    # exact chord distances, stable sort by (distance, index)
    diff = dst_xyz[:, None, :] - src_xyz[idx]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    order = np.lexsort((idx, d2), axis=1)
    return np.take_along_axis(idx, order, axis=1)[:, :k]


@dataclass(frozen=True)
class NeighborMap:
    """k-nearest-neighbor lists between a mesh and a lat-lon grid."""

    mesh_from_grid: np.ndarray  # [npix, k] grid indices nearest each pixel
    grid_from_mesh: np.ndarray  # [ngrid, k] pixel indices nearest each grid point
    k: int


def knn_on_grid(mesh: HealpixMesh, grid_xyz: np.ndarray, k: int = 24) -> NeighborMap:
    """Neighbor lists in both directions between mesh pixels and grid points."""
    grid_xyz = np.asarray(grid_xyz, dtype=np.float64)
    if grid_xyz.ndim != 2 or grid_xyz.shape[1] != 3 or len(grid_xyz) == 0:
        raise ConfigError("grid must be a non-empty [n, 3] array of unit vectors")
    return NeighborMap(
        mesh_from_grid=_knn_points(grid_xyz, mesh.xyz, k),
        grid_from_mesh=_knn_points(mesh.xyz, grid_xyz, k),
        k=k,
    )
