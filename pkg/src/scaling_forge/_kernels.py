"""Numba kernels for the spin solver hot loops.

All kernels are sequential and self-contained, so results are bit-identical
for a fixed seed.  Couplings arrive in CSR form: intralayer neighbors as
(ptr, idx) with the exchange applied at run time, interlayer neighbors as
(ptr, idx, w) with baked-in weights.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _site_field(spins, i, intra_ptr, intra_idx, inter_ptr, inter_idx, inter_w, j_ex):
    """Coupling field on site i excluding anisotropy: J * sum_nn S - sum w S."""
    fx = fy = fz = 0.0
    for k in range(intra_ptr[i], intra_ptr[i + 1]):
        n = intra_idx[k]
        fx += spins[n, 0]
        fy += spins[n, 1]
        fz += spins[n, 2]
    fx *= j_ex
    fy *= j_ex
    fz *= j_ex
    for k in range(inter_ptr[i], inter_ptr[i + 1]):
        n = inter_idx[k]
        w = inter_w[k]
        fx -= w * spins[n, 0]
        fy -= w * spins[n, 1]
        fz -= w * spins[n, 2]
    return fx, fy, fz


@njit(cache=True)
def total_energy(spins, intra_ptr, intra_idx, inter_ptr, inter_idx, inter_w,
                 j_ex, anisotropy):
    """-J sum_bonds S.S - D sum Sz^2 + sum_pairs w S.S (CSR double counts)."""
    e_pair = 0.0
    n = spins.shape[0]
    for i in range(n):
        fx, fy, fz = _site_field(
            spins, i, intra_ptr, intra_idx, inter_ptr, inter_idx, inter_w, j_ex
        )
        e_pair += spins[i, 0] * fx + spins[i, 1] * fy + spins[i, 2] * fz
    e_aniso = 0.0
    for i in range(n):
        e_aniso += spins[i, 2] * spins[i, 2]
    return -0.5 * e_pair - anisotropy * e_aniso


@njit(cache=True, inline="always")
def _random_unit_vector():
    # Marsaglia rejection sampling on the sphere
    while True:
        v1 = 2.0 * np.random.random() - 1.0
        v2 = 2.0 * np.random.random() - 1.0
        s = v1 * v1 + v2 * v2
        if s < 1.0:
            root = np.sqrt(1.0 - s)
            return 2.0 * v1 * root, 2.0 * v2 * root, 1.0 - 2.0 * s


@njit(cache=True)
def metropolis_anneal(spins, intra_ptr, intra_idx, inter_ptr, inter_idx, inter_w,
                      j_ex, anisotropy, n_steps, t_start, t_end, seed):
    """Single-spin Metropolis with a geometric temperature schedule.

    Modifies ``spins`` in place; returns the acceptance count.
    """
    np.random.seed(seed)
    n = spins.shape[0]
    accepted = 0
    if n_steps <= 1:
        ratio = 1.0
    else:
        ratio = (t_end / t_start) ** (1.0 / (n_steps - 1)) if t_start > 0.0 else 1.0
    temp = t_start
    for step in range(n_steps):
        i = np.random.randint(0, n)
        nx, ny, nz = _random_unit_vector()
        fx, fy, fz = _site_field(
            spins, i, intra_ptr, intra_idx, inter_ptr, inter_idx, inter_w, j_ex
        )
        dx = nx - spins[i, 0]
        dy = ny - spins[i, 1]
        dz = nz - spins[i, 2]
        d_e = -(dx * fx + dy * fy + dz * fz) - anisotropy * (
            nz * nz - spins[i, 2] * spins[i, 2]
        )
        if d_e <= 0.0 or (temp > 0.0 and np.random.random() < np.exp(-d_e / temp)):
            spins[i, 0] = nx
            spins[i, 1] = ny
            spins[i, 2] = nz
            accepted += 1
        temp *= ratio
    return accepted


@njit(cache=True)
def torque_descent(spins, intra_ptr, intra_idx, inter_ptr, inter_idx, inter_w,
                   j_ex, anisotropy, rate, torque_tol, max_iters):
    """Projected descent S <- normalize(S + rate * h_perp), all sites at once.

    The step is backtracked (halved) whenever it would raise the energy, so
    the recorded energy trace is non-increasing.  Stops when the largest
    torque |S x h| drops below ``torque_tol`` or after ``max_iters`` sweeps.

    Returns (energy_trace, n_iters, final_max_torque, converged); the trace
    holds the energy after each accepted sweep.
    """
    n = spins.shape[0]
    trace = np.empty(max_iters)
    energy = total_energy(
        spins, intra_ptr, intra_idx, inter_ptr, inter_idx, inter_w, j_ex, anisotropy
    )
    fields = np.empty((n, 3))
    trial = np.empty((n, 3))
    max_torque = 0.0
    n_iters = 0
    converged = False
    # step memory: backtracking halvings persist across sweeps (the stable
    # step scales like 1/J); successful sweeps regrow it toward the nominal rate
    step = rate
    stalled = 0  # consecutive sweeps with no energy decrease

    for it in range(max_iters):
        max_torque = 0.0
        for i in range(n):
            fx, fy, fz = _site_field(
                spins, i, intra_ptr, intra_idx, inter_ptr, inter_idx, inter_w, j_ex
            )
            fz += 2.0 * anisotropy * spins[i, 2]
            fields[i, 0] = fx
            fields[i, 1] = fy
            fields[i, 2] = fz
            tx = spins[i, 1] * fz - spins[i, 2] * fy
            ty = spins[i, 2] * fx - spins[i, 0] * fz
            tz = spins[i, 0] * fy - spins[i, 1] * fx
            t = np.sqrt(tx * tx + ty * ty + tz * tz)
            if t > max_torque:
                max_torque = t
        if max_torque < torque_tol:
            converged = True
            break

        backtracked = False
        while True:
            for i in range(n):
                dot = (
                    spins[i, 0] * fields[i, 0]
                    + spins[i, 1] * fields[i, 1]
                    + spins[i, 2] * fields[i, 2]
                )
                px = fields[i, 0] - dot * spins[i, 0]
                py = fields[i, 1] - dot * spins[i, 1]
                pz = fields[i, 2] - dot * spins[i, 2]
                sx = spins[i, 0] + step * px
                sy = spins[i, 1] + step * py
                sz = spins[i, 2] + step * pz
                norm = np.sqrt(sx * sx + sy * sy + sz * sz)
                trial[i, 0] = sx / norm
                trial[i, 1] = sy / norm
                trial[i, 2] = sz / norm
            new_energy = total_energy(
                trial, intra_ptr, intra_idx, inter_ptr, inter_idx, inter_w,
                j_ex, anisotropy,
            )
            if new_energy <= energy or step < 1e-12:
                break
            step *= 0.5
            backtracked = True
        if new_energy > energy:
            break  # stalled at the backtracking floor; keep the trace monotone
        if new_energy == energy:
            stalled += 1
            if stalled > 64:
                break  # energy at the float64 resolution floor
        else:
            stalled = 0
        spins[:] = trial
        energy = new_energy
        trace[n_iters] = energy
        n_iters += 1
        if not backtracked and step < rate:
            step = min(step * 1.3, rate)

    return trace[:n_iters], n_iters, max_torque, converged
