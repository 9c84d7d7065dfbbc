#!/usr/bin/env python3
"""Generate reference pixel-center fixtures for the mesh tests.

This file is a second, independently written realization of the published
HEALPix standard. Centers are produced ring by ring from the closed-form
ring equations (no Morton tables, no face lookup vectors shared with the
package implementation), then re-indexed into NESTED order through a
digit-walk encoder. The resulting [npix, 2] (lat, lon) tables are written
as MSGT files under tests/fixtures/ and committed; the test suite never
executes this script.

Run from the repository root:  python3 scripts/make_healpix_fixtures.py
"""

import math
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))
from sphere_bsa.msgt import write_msgt  # noqa: E402

OUT_DIR = pathlib.Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def ring_centers(nside):
    """(z, phi) of every pixel in RING order, from the ring closed forms."""
    centers = []
    # north polar cap: rings 1 .. nside-1 with 4i pixels each
    for i in range(1, nside):
        z = 1.0 - (i * i) / (3.0 * nside * nside)
        for j in range(1, 4 * i + 1):
            centers.append((z, (math.pi / (2 * i)) * (j - 0.5)))
    # equatorial belt: rings nside .. 3*nside with 4*nside pixels each
    for i in range(nside, 3 * nside + 1):
        z = 4.0 / 3.0 - (2.0 * i) / (3.0 * nside)
        s = (i - nside + 1) % 2
        for j in range(1, 4 * nside + 1):
            centers.append((z, (math.pi / (2 * nside)) * (j - s / 2.0)))
    # south polar cap mirrors the north
    for i in range(nside - 1, 0, -1):
        z = (i * i) / (3.0 * nside * nside) - 1.0
        for j in range(1, 4 * i + 1):
            centers.append((z, (math.pi / (2 * i)) * (j - 0.5)))
    return np.array(centers)


# ring offsets of the 12 base faces in the published construction
_FACE_RING = [2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4]
_FACE_PHI = [1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7]


def ring_decompose(nside, ring_index):
    """RING index -> (jr, jp, kshift): ring counted from the north pole,
    1-based position within the ring, and the half-cell phase of the ring."""
    npix = 12 * nside * nside
    ncap = 2 * nside * (nside - 1)
    p = ring_index
    if p < ncap:  # north cap, ring i holds 4i pixels
        ph = (p + 1) / 2.0
        i = int(math.floor(math.sqrt(ph - math.sqrt(math.floor(ph))))) + 1
        return i, p + 1 - 2 * i * (i - 1), 0
    if p < npix - ncap:  # equatorial belt, 4*nside per ring
        pp = p - ncap
        i = pp // (4 * nside) + nside
        j = pp % (4 * nside) + 1
        # the belt rings alternate a half-cell phase; express the position
        # in the diagonal-line convention used by the face relations below
        kshift = (i - nside) % 2
        jp = j + kshift
        if jp > 4 * nside:
            jp -= 4 * nside
        return i, jp, kshift
    ps = npix - 1 - p  # mirror through the south pole
    ph = (ps + 1) / 2.0
    i_s = int(math.floor(math.sqrt(ph - math.sqrt(math.floor(ph))))) + 1
    j = 4 * i_s + 1 - (ps + 1 - 2 * i_s * (i_s - 1))
    return 4 * nside - i_s, j, 0


def ring_to_nest_index(nside, ring_index):
    """NESTED index of the pixel with the given RING index.

    Integer inversion of the published (face, x, y) -> (jr, jp) relations:
    try every face and azimuth wrap, accept the unique in-range solution,
    then encode (x, y) by a base-4 digit walk.
    """
    jr, jp, kshift = ring_decompose(nside, ring_index)
    nr = min(jr, 4 * nside - jr, nside)
    hits = []
    for face in range(12):
        s = _FACE_RING[face] * nside - jr - 1  # x + y
        if not 0 <= s <= 2 * (nside - 1):
            continue
        base = 2 * jp - _FACE_PHI[face] * nr - 1 - kshift
        for wrap in (-8 * nr, 0, 8 * nr):
            d = base + wrap  # x - y
            if (s + d) % 2 != 0:
                continue
            x = (s + d) // 2
            y = (s - d) // 2
            if 0 <= x < nside and 0 <= y < nside:
                hits.append((face, x, y))
    if len(hits) != 1:
        raise AssertionError(
            f"nside={nside} ring={ring_index}: ambiguous inversion {hits}")
    face, x, y = hits[0]

    # base-4 digit walk: interleave the bits of (x, y) by repeated division
    f = 0
    scale = 1
    while x > 0 or y > 0:
        f += scale * ((x % 2) + 2 * (y % 2))
        x //= 2
        y //= 2
        scale *= 4
    return face * nside * nside + f


def nest_centers(nside):
    ring = ring_centers(nside)
    npix = 12 * nside * nside
    out = np.zeros((npix, 2))
    for ring_idx in range(npix):
        nest_idx = ring_to_nest_index(nside, ring_idx)
        z, phi = ring[ring_idx]
        out[nest_idx, 0] = math.asin(max(-1.0, min(1.0, z)))
        out[nest_idx, 1] = phi % (2 * math.pi)
    return out


def main():
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    for nside in (1, 2, 4, 8):
        table = nest_centers(nside)
        path = OUT_DIR / f"healpix_nside{nside}_latlon.msgt"
        write_msgt(path, table)
        print(f"wrote {path} [{table.shape[0]} pixels]")


if __name__ == "__main__":
    main()
