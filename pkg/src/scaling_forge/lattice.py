"""Commensurate twisted-bilayer honeycomb superlattices.

Two honeycomb layers are rotated symmetrically by +/- theta/2.  Commensurate
twist angles are indexed by a single integer m >= 1 via

    cos(theta) = (3 m^2 + 3 m + 1/2) / (3 m^2 + 3 m + 1),

which gives theta(1) = 21.787 deg down to theta(32) = 1.018 deg.  The moire
unit cell of index m contains 3 m^2 + 3 m + 1 honeycomb cells per layer
(two sites each).  All lengths are in units of the intralayer lattice
constant a0 = 1; couplings are in meV.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

# honeycomb primitive vectors and the A->B basis offset, a0 = 1
_A1 = np.array([1.0, 0.0])
_A2 = np.array([0.5, 0.5 * math.sqrt(3.0)])
_DELTA_AB = (_A1 + _A2) / 3.0

# reciprocal vectors of the unrotated layer (a_i . b_j = 2 pi delta_ij)
_B1 = 2.0 * math.pi * np.array([1.0, -1.0 / math.sqrt(3.0)])
_B2 = 2.0 * math.pi * np.array([0.0, 2.0 / math.sqrt(3.0)])

NN_DISTANCE = 1.0 / math.sqrt(3.0)

TOP = 0
BOTTOM = 1
_LAYER_NAMES = {"top": TOP, "bottom": BOTTOM}

# endpoint slack for angle-range queries: published angle ranges are quoted
# to 0.01 deg, so membership is decided within half a quantum
ANGLE_TOL_DEG = 0.005


@dataclass(frozen=True)
class CouplingProfile:
    """Interlayer coupling model.

    w(u, rho) = j_perp_scale * [(1 - registry_harmonic) + registry_harmonic * g(u)]
                * exp(-(rho / rho0)^2),   rho0 = cutoff_radius / 2,

    hard zero for rho > cutoff_radius.  g(u) is the lowest harmonic of the
    local stacking registry u, normalized to +1 at AA and -1/2 at AB/BA, so
    positive values are antiferromagnetic under the bilayer sign convention.
    registry_harmonic in [0, 1] mixes a uniform coupling (0) with the fully
    stacking-modulated form (1).
    """

    j_perp_scale: float = 1.0
    registry_harmonic: float = 1.0
    cutoff_radius: float = 1.5

    def __post_init__(self):
        if self.cutoff_radius <= 0:
            raise ValueError(f"cutoff_radius must be > 0, got {self.cutoff_radius}")
        if not 0.0 <= self.registry_harmonic <= 1.0:
            raise ValueError(
                f"registry_harmonic must be in [0, 1], got {self.registry_harmonic}"
            )


@dataclass(frozen=True)
class LatticeSite:
    id: int
    layer: str          # "top" or "bottom"
    sublattice: str     # "A" or "B"
    position: np.ndarray


@dataclass(eq=False)
class LatticeGraph:
    """Sites, intralayer bonds and weighted interlayer pairs of one moire cell.

    Site ids are layer-major (all top sites first), cell-major, with the A
    sublattice before B inside each cell.  Positions are wrapped into the
    moire cell spanned by ``cell_vectors`` (rows t1, t2).  Immutable after
    construction; safe to share read-only across workers.
    """

    m: int
    theta_deg: float
    cell_vectors: np.ndarray           # (2, 2), rows t1, t2
    positions: np.ndarray              # (n_sites, 2)
    layers: np.ndarray                 # (n_sites,) uint8, TOP / BOTTOM
    sublattices: np.ndarray            # (n_sites,) uint8, 0=A, 1=B
    intra_bonds: np.ndarray            # (n_bonds, 2) int64, each bond once
    inter_i: np.ndarray                # (n_pairs,) int64, top-layer side
    inter_j: np.ndarray                # (n_pairs,) int64, bottom-layer side
    inter_w: np.ndarray                # (n_pairs,) float64, meV
    profile: CouplingProfile
    _caches: dict = field(default_factory=dict, repr=False)

    @property
    def n_sites(self) -> int:
        return len(self.positions)

    def layer_ids(self, layer) -> np.ndarray:
        return np.flatnonzero(self.layers == _layer_code(layer))

    def site(self, i: int) -> LatticeSite:
        if not 0 <= i < self.n_sites:
            raise IndexError(f"site index {i} out of range [0, {self.n_sites})")
        return LatticeSite(
            id=i,
            layer="top" if self.layers[i] == TOP else "bottom",
            sublattice="AB"[self.sublattices[i]],
            position=self.positions[i].copy(),
        )

    @property
    def sites(self):
        return [self.site(i) for i in range(self.n_sites)]

    def min_image(self, disp: np.ndarray) -> np.ndarray:
        """Minimum-image displacement(s) under the moire cell periodicity."""
        return _min_image(np.asarray(disp, dtype=float), self.cell_vectors)

    def neighbor_csr(self):
        """Intralayer adjacency in CSR form (ptr, idx), both bond directions."""
        if "intra_csr" not in self._caches:
            self._caches["intra_csr"] = _bonds_to_csr(self.intra_bonds, self.n_sites)
        return self._caches["intra_csr"]

    def interlayer_csr(self):
        """Interlayer weighted adjacency in CSR form (ptr, idx, w)."""
        if "inter_csr" not in self._caches:
            self._caches["inter_csr"] = _pairs_to_csr(
                self.inter_i, self.inter_j, self.inter_w, self.n_sites
            )
        return self._caches["inter_csr"]

    def to_json(self) -> str:
        """Debug export; not a stability contract."""
        return json.dumps(
            {
                "m": self.m,
                "theta_deg": self.theta_deg,
                "cell_vectors": self.cell_vectors.tolist(),
                "sites": [
                    {
                        "id": i,
                        "layer": "top" if self.layers[i] == TOP else "bottom",
                        "sublattice": "AB"[self.sublattices[i]],
                        "position": self.positions[i].tolist(),
                    }
                    for i in range(self.n_sites)
                ],
                "intra_bonds": self.intra_bonds.tolist(),
                "inter_pairs": [
                    [int(i), int(j), float(w)]
                    for i, j, w in zip(self.inter_i, self.inter_j, self.inter_w)
                ],
            }
        )


def _layer_code(layer) -> int:
    if isinstance(layer, str):
        try:
            return _LAYER_NAMES[layer]
        except KeyError:
            raise ValueError(f"layer must be 'top' or 'bottom', got {layer!r}") from None
    if layer in (TOP, BOTTOM):
        return int(layer)
    raise ValueError(f"layer must be 'top' or 'bottom', got {layer!r}")


def _check_index(m) -> int:
    if not isinstance(m, (int, np.integer)) or isinstance(m, bool):
        raise ValueError(f"commensuration index must be an integer, got {m!r}")
    if m < 1:
        raise ValueError(f"commensuration index must be >= 1, got {m}")
    return int(m)


def commensurate_angle(m) -> float:
    """Twist angle in degrees for commensuration index m; decreasing in m."""
    m = _check_index(m)
    k = 3.0 * m * m + 3.0 * m
    return math.degrees(math.acos((k + 0.5) / (k + 1.0)))


def commensurate_indices_in_range(theta_min: float, theta_max: float,
                                  tol: float = ANGLE_TOL_DEG) -> list[int]:
    """All m with theta(m) inside [theta_min, theta_max], ascending in m.

    Endpoints are honored within ``tol`` degrees because quoted angle ranges
    are rounded (theta(8) = 3.8902 deg must match an upper bound of 3.89).
    """
    if not 0.0 < theta_min < theta_max:
        raise ValueError(
            f"need 0 < theta_min < theta_max, got ({theta_min}, {theta_max})"
        )
    out = []
    m = 1
    while True:
        th = commensurate_angle(m)
        if th < theta_min - tol:
            break
        if th <= theta_max + tol:
            out.append(m)
        m += 1
    return out


def cells_per_layer(m) -> int:
    m = _check_index(m)
    return 3 * m * m + 3 * m + 1


def registry_modulation(displacement: np.ndarray) -> float:
    """Lowest-harmonic stacking function: +1 at AA, -1/2 at AB/BA."""
    u = np.asarray(displacement, dtype=float)
    return (
        np.cos(u @ _B1) + np.cos(u @ _B2) + np.cos(u @ (_B1 + _B2))
    ) / 3.0


def interlayer_coupling(profile: CouplingProfile, registry_displacement,
                        in_plane_distance: float) -> float:
    """Coupling weight in meV for one vertical pair.

    Zero beyond the cutoff; inside, a Gaussian envelope of the in-plane
    distance times the registry modulation.  Positive = antiferromagnetic.
    """
    if in_plane_distance < 0:
        raise ValueError(f"in_plane_distance must be >= 0, got {in_plane_distance}")
    if in_plane_distance > profile.cutoff_radius:
        return 0.0
    rho0 = profile.cutoff_radius / 2.0
    g = registry_modulation(registry_displacement)
    mix = (1.0 - profile.registry_harmonic) + profile.registry_harmonic * g
    return profile.j_perp_scale * mix * math.exp(-((in_plane_distance / rho0) ** 2))


def _rotation(theta_rad: float) -> np.ndarray:
    c, s = math.cos(theta_rad), math.sin(theta_rad)
    return np.array([[c, -s], [s, c]])


def _supercell_rows(m: int, layer: int) -> np.ndarray:
    # integer coordinates of the moire vectors t1, t2 in each layer's basis;
    # the same physical cell is (m, m+1)-indexed in one layer and
    # (m+1, m)-indexed in the other
    if layer == BOTTOM:
        return np.array([[m, m + 1], [-(m + 1), 2 * m + 1]], dtype=np.int64)
    return np.array([[m + 1, m], [-m, 2 * m + 1]], dtype=np.int64)


def _enumerate_cells(mat: np.ndarray):
    """Integer cells (i, j) of one fundamental domain of the supercell.

    Exact: a cell belongs iff both components of adj(M) (i, j)^T land in
    [0, det).  Returns the cell list plus the wrap map key -> cell index.
    """
    a, b = int(mat[0, 0]), int(mat[0, 1])
    c, d = int(mat[1, 0]), int(mat[1, 1])
    det = a * d - b * c
    assert det > 0

    def key(i, j):
        return ((i * d - j * c) % det, (-i * b + j * a) % det)

    corners = np.array([[0, 0], mat[0], mat[1], mat[0] + mat[1]])
    lo, hi = corners.min(axis=0) - 1, corners.max(axis=0) + 1
    cells, index = [], {}
    for i in range(lo[0], hi[0] + 1):
        for j in range(lo[1], hi[1] + 1):
            f1 = (i * d - j * c) % det
            f2 = (-i * b + j * a) % det
            if (i * d - j * c) == f1 and (-i * b + j * a) == f2:
                index[(f1, f2)] = len(cells)
                cells.append((i, j))
    assert len(cells) == det, (len(cells), det)
    return cells, index, key


def _min_image(disp: np.ndarray, cell_vectors: np.ndarray) -> np.ndarray:
    """Shortest periodic image of displacement(s), scanning 3x3 neighbors."""
    squeeze = disp.ndim == 1
    d = np.atleast_2d(disp)
    frac = d @ np.linalg.inv(cell_vectors)
    frac -= np.floor(frac + 0.5)
    d0 = frac @ cell_vectors
    best = d0.copy()
    best_r2 = np.einsum("ij,ij->i", best, best)
    for n1 in (-1, 0, 1):
        for n2 in (-1, 0, 1):
            if n1 == 0 and n2 == 0:
                continue
            cand = d0 + n1 * cell_vectors[0] + n2 * cell_vectors[1]
            r2 = np.einsum("ij,ij->i", cand, cand)
            closer = r2 < best_r2
            best[closer] = cand[closer]
            best_r2[closer] = r2[closer]
    return best[0] if squeeze else best


def _bonds_to_csr(bonds: np.ndarray, n: int):
    src = np.concatenate([bonds[:, 0], bonds[:, 1]])
    dst = np.concatenate([bonds[:, 1], bonds[:, 0]])
    order = np.argsort(src, kind="stable")
    src, dst = src[order], dst[order]
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, src + 1, 1)
    np.cumsum(ptr, out=ptr)
    return ptr, dst.astype(np.int64)


def _pairs_to_csr(pi: np.ndarray, pj: np.ndarray, w: np.ndarray, n: int):
    src = np.concatenate([pi, pj])
    dst = np.concatenate([pj, pi])
    ww = np.concatenate([w, w])
    order = np.argsort(src, kind="stable")
    src, dst, ww = src[order], dst[order], ww[order]
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, src + 1, 1)
    np.cumsum(ptr, out=ptr)
    return ptr, dst.astype(np.int64), ww.astype(np.float64)


def _build_layer(m: int, layer: int, theta_rad: float):
    """Positions (unwrapped) and A->B bond cell offsets for one layer."""
    mat = _supercell_rows(m, layer)
    cells, index, key = _enumerate_cells(mat)
    half = +0.5 if layer == TOP else -0.5
    rot = _rotation(half * theta_rad)
    basis = np.array([[0.0, 0.0], _DELTA_AB])

    n_cells = len(cells)
    pos = np.empty((2 * n_cells, 2))
    subl = np.empty(2 * n_cells, dtype=np.uint8)
    for ci, (i, j) in enumerate(cells):
        origin = i * _A1 + j * _A2
        for s in (0, 1):
            pos[2 * ci + s] = rot @ (origin + basis[s])
            subl[2 * ci + s] = s

    bonds = []
    # A site in cell (i, j) bonds to B sites in cells (i, j), (i-1, j), (i, j-1)
    for ci, (i, j) in enumerate(cells):
        a_id = 2 * ci
        for di, dj in ((0, 0), (-1, 0), (0, -1)):
            cj = index[key(i + di, j + dj)]
            bonds.append((a_id, 2 * cj + 1))
    return pos, subl, np.array(bonds, dtype=np.int64)


def build_superlattice(m, profile: CouplingProfile | None = None) -> LatticeGraph:
    """Bilayer moire graph for index m: sites, bonds and interlayer pairs."""
    m = _check_index(m)
    if profile is None:
        profile = CouplingProfile()
    theta_rad = math.radians(commensurate_angle(m))

    # the two layer parametrizations must describe the same physical cell
    t_bottom = _supercell_rows(m, BOTTOM).astype(float) @ np.vstack([_A1, _A2])
    t_bottom = t_bottom @ _rotation(-0.5 * theta_rad).T
    t_top = _supercell_rows(m, TOP).astype(float) @ np.vstack([_A1, _A2])
    t_top = t_top @ _rotation(+0.5 * theta_rad).T
    assert np.allclose(t_bottom, t_top, atol=1e-9)
    cell = t_bottom

    pos_t, subl_t, bonds_t = _build_layer(m, TOP, theta_rad)
    pos_b, subl_b, bonds_b = _build_layer(m, BOTTOM, theta_rad)
    n_layer = len(pos_t)

    positions = np.vstack([pos_t, pos_b])
    frac = positions @ np.linalg.inv(cell)
    positions = (frac - np.floor(frac)) @ cell
    layers = np.concatenate(
        [np.full(n_layer, TOP, np.uint8), np.full(n_layer, BOTTOM, np.uint8)]
    )
    sublattices = np.concatenate([subl_t, subl_b])
    intra_bonds = np.vstack([bonds_t, bonds_b + n_layer])

    inter_i, inter_j, inter_w = _interlayer_pairs(
        positions[:n_layer], positions[n_layer:], cell, profile
    )
    return LatticeGraph(
        m=m,
        theta_deg=math.degrees(theta_rad),
        cell_vectors=cell,
        positions=positions,
        layers=layers,
        sublattices=sublattices,
        intra_bonds=intra_bonds,
        inter_i=inter_i,
        inter_j=inter_j + n_layer,
        inter_w=inter_w,
        profile=profile,
    )


def build_monolayer(m, layer: str = "top") -> LatticeGraph:
    """Single honeycomb layer with the same periodic cell; no interlayer pairs.

    Oracle geometry: the analytic ferromagnetic ground state is exact here.
    """
    m = _check_index(m)
    code = _layer_code(layer)
    theta_rad = math.radians(commensurate_angle(m))
    mat = _supercell_rows(m, code).astype(float) @ np.vstack([_A1, _A2])
    cell = mat @ _rotation((+0.5 if code == TOP else -0.5) * theta_rad).T

    pos, subl, bonds = _build_layer(m, code, theta_rad)
    frac = pos @ np.linalg.inv(cell)
    pos = (frac - np.floor(frac)) @ cell
    return LatticeGraph(
        m=m,
        theta_deg=math.degrees(theta_rad),
        cell_vectors=cell,
        positions=pos,
        layers=np.full(len(pos), code, np.uint8),
        sublattices=subl,
        intra_bonds=bonds,
        inter_i=np.empty(0, np.int64),
        inter_j=np.empty(0, np.int64),
        inter_w=np.empty(0, np.float64),
        profile=CouplingProfile(j_perp_scale=0.0),
    )


def _interlayer_pairs(pos_top, pos_bottom, cell, profile: CouplingProfile):
    if profile.j_perp_scale == 0.0:
        return (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.float64))

    # the cutoff must stay below half the cell extent so each (i, j) pair has
    # a unique periodic image inside it
    area = abs(cell[0, 0] * cell[1, 1] - cell[0, 1] * cell[1, 0])
    heights = [area / np.linalg.norm(cell[k]) for k in (0, 1)]
    if profile.cutoff_radius >= 0.5 * min(heights):
        raise ValueError(
            f"cutoff_radius {profile.cutoff_radius} too large for moire cell "
            f"(min height {min(heights):.3f})"
        )

    offsets = [
        n1 * cell[0] + n2 * cell[1] for n1 in (-1, 0, 1) for n2 in (-1, 0, 1)
    ]
    tiled = np.vstack([pos_bottom + off for off in offsets])
    tree = cKDTree(tiled)
    n_bottom = len(pos_bottom)

    ii, jj, ww = [], [], []
    hits = tree.query_ball_point(pos_top, r=profile.cutoff_radius)
    for i, hit in enumerate(hits):
        for h in sorted(hit):
            j = h % n_bottom
            u = pos_top[i] - tiled[h]
            w = interlayer_coupling(profile, u, float(np.linalg.norm(u)))
            ii.append(i)
            jj.append(j)
            ww.append(w)
    return (
        np.array(ii, dtype=np.int64),
        np.array(jj, dtype=np.int64),
        np.array(ww, dtype=np.float64),
    )
