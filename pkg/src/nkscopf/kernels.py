"""Hot numeric kernels over the admittance sparsity pattern.

Every kernel exists in two variants: a numba ``@njit`` loop and a pure-numpy
vectorized fallback.  The active backend is chosen at import time from the
``NKSCOPF_NO_NUMBA`` environment variable (any of ``1/true/yes`` selects the
numpy path) and can be switched at runtime with :func:`set_backend`, which the
kernel benchmark uses to compare both paths.

All kernels take the admittance matrix as COO-style entry arrays
``(erow, ecol, gval, bval)`` in canonical CSR order, bus voltage magnitudes
``vm`` and angles ``va``, and return either per-bus or per-entry arrays.
``tperm`` is the permutation mapping each entry to the entry of the
transposed coordinate pair; the pattern is structurally symmetric.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "bus_power",
    "flow_jacobian_entries",
    "weighted_flow_hessian",
    "set_backend",
    "get_backend",
    "available_backends",
]


# ---------------------------------------------------------------------------
# pure numpy implementations
# ---------------------------------------------------------------------------


def _bus_power_numpy(erow, ecol, gval, bval, vm, va, n_bus):
    dth = va[erow] - va[ecol]
    cosd = np.cos(dth)
    sind = np.sin(dth)
    vv = vm[erow] * vm[ecol]
    p = np.bincount(erow, weights=vv * (gval * cosd + bval * sind),
                    minlength=n_bus)
    q = np.bincount(erow, weights=vv * (gval * sind - bval * cosd),
                    minlength=n_bus)
    return p, q


def _flow_jacobian_entries_numpy(erow, ecol, gval, bval, vm, va, pcalc, qcalc):
    dth = va[erow] - va[ecol]
    cosd = np.cos(dth)
    sind = np.sin(dth)
    a = gval * cosd + bval * sind
    b = gval * sind - bval * cosd
    vr = vm[erow]
    vc = vm[ecol]
    jpth = vr * vc * b
    jpv = vr * a
    jqth = -vr * vc * a
    jqv = vr * b
    diag = erow == ecol
    r = erow[diag]
    v2 = vm[r] * vm[r]
    jpth[diag] = -qcalc[r] - bval[diag] * v2
    jpv[diag] = (pcalc[r] + gval[diag] * v2) / vm[r]
    jqth[diag] = pcalc[r] - gval[diag] * v2
    jqv[diag] = (qcalc[r] - bval[diag] * v2) / vm[r]
    return jpth, jpv, jqth, jqv


def _weighted_flow_hessian_numpy(erow, ecol, gval, bval, vm, va, lp, lq,
                                 tperm, n_bus):
    dth = va[erow] - va[ecol]
    cosd = np.cos(dth)
    sind = np.sin(dth)
    a = gval * cosd + bval * sind
    b = gval * sind - bval * cosd
    c = lp[erow] * a + lq[erow] * b
    d = lp[erow] * b - lq[erow] * a
    off = erow != ecol
    vr = vm[erow]
    vc = vm[ecol]
    vvc = np.where(off, vr * vc * c, 0.0)
    coff = np.where(off, c, 0.0)
    doff = np.where(off, d, 0.0)

    othth = vvc + vvc[tperm]
    othv = vr * (doff[tperm] - doff)
    ovth = vc * (doff - doff[tperm])
    ovv = coff + coff[tperm]

    dthth = (-np.bincount(erow, weights=vvc, minlength=n_bus)
             - np.bincount(ecol, weights=vvc, minlength=n_bus))
    dthv = (np.bincount(ecol, weights=vr * doff, minlength=n_bus)
            - np.bincount(erow, weights=vc * doff, minlength=n_bus))
    dvv = 2.0 * np.bincount(erow[~off], weights=c[~off], minlength=n_bus)
    return othth, othv, ovth, ovv, dthth, dthv, dvv


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

try:  # pragma: no cover - exercised through the backend switch
    from numba import njit

    _HAVE_NUMBA = True

    @njit(cache=True)
    def _bus_power_numba(erow, ecol, gval, bval, vm, va, n_bus):
        p = np.zeros(n_bus)
        q = np.zeros(n_bus)
        for e in range(erow.shape[0]):
            r = erow[e]
            cc = ecol[e]
            dth = va[r] - va[cc]
            cosd = np.cos(dth)
            sind = np.sin(dth)
            vv = vm[r] * vm[cc]
            p[r] += vv * (gval[e] * cosd + bval[e] * sind)
            q[r] += vv * (gval[e] * sind - bval[e] * cosd)
        return p, q

    @njit(cache=True)
    def _flow_jacobian_entries_numba(erow, ecol, gval, bval, vm, va,
                                     pcalc, qcalc):
        ne = erow.shape[0]
        jpth = np.empty(ne)
        jpv = np.empty(ne)
        jqth = np.empty(ne)
        jqv = np.empty(ne)
        for e in range(ne):
            r = erow[e]
            cc = ecol[e]
            if r == cc:
                v2 = vm[r] * vm[r]
                jpth[e] = -qcalc[r] - bval[e] * v2
                jpv[e] = (pcalc[r] + gval[e] * v2) / vm[r]
                jqth[e] = pcalc[r] - gval[e] * v2
                jqv[e] = (qcalc[r] - bval[e] * v2) / vm[r]
            else:
                dth = va[r] - va[cc]
                cosd = np.cos(dth)
                sind = np.sin(dth)
                a = gval[e] * cosd + bval[e] * sind
                b = gval[e] * sind - bval[e] * cosd
                jpth[e] = vm[r] * vm[cc] * b
                jpv[e] = vm[r] * a
                jqth[e] = -vm[r] * vm[cc] * a
                jqv[e] = vm[r] * b
        return jpth, jpv, jqth, jqv

    @njit(cache=True)
    def _weighted_flow_hessian_numba(erow, ecol, gval, bval, vm, va, lp, lq,
                                     tperm, n_bus):
        ne = erow.shape[0]
        othth = np.zeros(ne)
        othv = np.zeros(ne)
        ovth = np.zeros(ne)
        ovv = np.zeros(ne)
        dthth = np.zeros(n_bus)
        dthv = np.zeros(n_bus)
        dvv = np.zeros(n_bus)
        for e in range(ne):
            r = erow[e]
            cc = ecol[e]
            if r == cc:
                dvv[r] += 2.0 * (lp[r] * gval[e] - lq[r] * bval[e])
                continue
            dth = va[r] - va[cc]
            cosd = np.cos(dth)
            sind = np.sin(dth)
            a = gval[e] * cosd + bval[e] * sind
            b = gval[e] * sind - bval[e] * cosd
            c = lp[r] * a + lq[r] * b
            d = lp[r] * b - lq[r] * a
            vvc = vm[r] * vm[cc] * c
            ep = tperm[e]
            othth[e] += vvc
            othth[ep] += vvc
            othv[e] -= vm[r] * d
            othv[ep] += vm[cc] * d
            ovth[e] += vm[cc] * d
            ovth[ep] -= vm[r] * d
            ovv[e] += c
            ovv[ep] += c
            dthth[r] -= vvc
            dthth[cc] -= vvc
            dthv[r] -= vm[cc] * d
            dthv[cc] += vm[r] * d
        return othth, othv, ovth, ovv, dthth, dthv, dvv

except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


_BACKENDS = {
    "numpy": {
        "bus_power": _bus_power_numpy,
        "flow_jacobian_entries": _flow_jacobian_entries_numpy,
        "weighted_flow_hessian": _weighted_flow_hessian_numpy,
    }
}
if _HAVE_NUMBA:
    _BACKENDS["numba"] = {
        "bus_power": _bus_power_numba,
        "flow_jacobian_entries": _flow_jacobian_entries_numba,
        "weighted_flow_hessian": _weighted_flow_hessian_numba,
    }


def _default_backend():
    flag = os.environ.get("NKSCOPF_NO_NUMBA", "").strip().lower()
    if flag in ("1", "true", "yes"):
        return "numpy"
    return "numba" if _HAVE_NUMBA else "numpy"


_ACTIVE = _default_backend()


def available_backends():
    return sorted(_BACKENDS)


def get_backend() -> str:
    return _ACTIVE


def set_backend(name: str) -> str:
    """Switch the kernel backend; returns the previously active one."""
    global _ACTIVE
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    previous = _ACTIVE
    _ACTIVE = name
    return previous


def bus_power(erow, ecol, gval, bval, vm, va, n_bus):
    """Real/reactive power flowing out of each bus into the network."""
    return _BACKENDS[_ACTIVE]["bus_power"](erow, ecol, gval, bval, vm, va, n_bus)


def flow_jacobian_entries(erow, ecol, gval, bval, vm, va, pcalc, qcalc):
    """Per-entry first derivatives of the bus powers.

    Entry e = (i, m) yields dP_i/dtheta_m, dP_i/dV_m, dQ_i/dtheta_m and
    dQ_i/dV_m; diagonal entries carry the self-derivatives.
    """
    return _BACKENDS[_ACTIVE]["flow_jacobian_entries"](
        erow, ecol, gval, bval, vm, va, pcalc, qcalc
    )


def weighted_flow_hessian(erow, ecol, gval, bval, vm, va, lp, lq, tperm, n_bus):
    """Hessian of sum_i (lp_i P_i + lq_i Q_i) in (theta, V) coordinates.

    Returns per-entry off-diagonal blocks (theta-theta, theta-V, V-theta, V-V)
    aligned with the admittance entries, plus per-bus diagonal-block
    accumulators (theta-theta, theta-V, V-V).
    """
    return _BACKENDS[_ACTIVE]["weighted_flow_hessian"](
        erow, ecol, gval, bval, vm, va, lp, lq, tperm, n_bus
    )
