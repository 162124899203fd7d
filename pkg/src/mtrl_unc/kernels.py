"""Plain (value-only) per-frequency multiline TRL solve, compiled with numba when available.

These kernels are the hot path of the Monte-Carlo harness and of nominal
calibrations. They mirror the uncertain implementation in :mod:`mtrl_unc.mtrl`
step by step, without derivatives.

Parameter vector layout (10 complex values per frequency)::

    0 a12          (x4n[2])      5 x4n[0]
    1 b21          (x4n[1])      6 a11
    2 a21/a11      (x1n[1])      7 b11
    3 b12/b11      (x1n[2])      8 k
    4 x1n[3]                     9 gamma
"""

import numpy as np

from ._jit import njit

NPARAM = 10

# status bits; values >= STATUS_FAIL mark an unusable frequency
ST_SIGN_FALLBACK = 1      # W sign test inconclusive, continuity fallback used
ST_UNWRAP = 2             # phase unwrap ambiguous for some line
ST_GAMMA_SWAPPED = 4      # x1/x4 roles swapped to match gamma estimate (informational)
STATUS_FAIL = 16
ST_SINGULAR_MEAS = 16
ST_DEGENERATE = 32
ST_NO_LAMBDA = 64
ST_PIVOT = 128
ST_REFLECT_AMBIG = 256
ST_SINGULAR_X = 512
ST_FLAGGED = ST_UNWRAP  # warnings that still invalidate a frequency

STATUS_TEXT = {
    ST_SIGN_FALLBACK: "weighting sign inconclusive (continuity fallback)",
    ST_UNWRAP: "phase unwrap ambiguous",
    ST_GAMMA_SWAPPED: "eigenvector roles swapped",
    ST_SINGULAR_MEAS: "singular line measurement",
    ST_DEGENERATE: "degenerate line set",
    ST_NO_LAMBDA: "no usable line pair (lambda ~ 0)",
    ST_PIVOT: "vanishing normalization pivot",
    ST_REFLECT_AMBIG: "reflect estimate too ambiguous",
    ST_SINGULAR_X: "singular coefficient matrix",
}


def describe_status(code):
    return [txt for bit, txt in STATUS_TEXT.items() if code & bit]


def is_valid(code):
    code = np.asarray(code)
    return (code < STATUS_FAIL) & ((code & ST_FLAGGED) == 0)


@njit
def _pq():
    PQ = np.zeros((4, 4), dtype=np.complex128)
    # P @ Q with P swapping the middle entries and Q the anti-diagonal sign pattern
    PQ[0, 3] = 1.0
    PQ[1, 2] = -1.0
    PQ[2, 1] = -1.0
    PQ[3, 0] = 1.0
    return PQ


@njit
def measurement_matrix(Ms):
    """M (4 x N) of column-stacked line measurements and their determinants."""
    N = Ms.shape[0]
    M = np.empty((4, N), dtype=np.complex128)
    d = np.empty(N, dtype=np.complex128)
    for i in range(N):
        M[0, i] = Ms[i, 0, 0]
        M[1, i] = Ms[i, 1, 0]
        M[2, i] = Ms[i, 0, 1]
        M[3, i] = Ms[i, 1, 1]
        d[i] = Ms[i, 0, 0] * Ms[i, 1, 1] - Ms[i, 0, 1] * Ms[i, 1, 0]
    return M, d


@njit
def model_wh(dl, gamma):
    """Model W^H = z y^T - y z^T with y = exp(gamma dl), z = exp(-gamma dl)."""
    y = np.exp(gamma * dl)
    z = np.exp(-gamma * dl)
    return np.outer(z, y) - np.outer(y, z)


@njit
def data_wh_candidate(M, d):
    """One sign candidate of W^H from the error-box-free product D^-1 M^T P Q M.

    Uses the dominant two-dimensional left singular subspace U2 and the 2x2
    projection C = U2^H T conj(U2): j*sqrt(det C) * U2 E U2^T equals the
    Takagi form G [[0, j], [-j, 0]] G^T up to sign.
    Returns (A, s, ok).
    """
    N = M.shape[1]
    PQ = _pq()
    T = (M.T @ PQ @ M)
    for i in range(N):
        T[i, :] = T[i, :] / d[i]
    T = 0.5 * (T + T.T)
    U, s, Vh = np.linalg.svd(T)
    A = np.zeros((N, N), dtype=np.complex128)
    if s[0] == 0.0 or s[1] <= 1e-10 * s[0]:
        return A, s, False
    U2 = np.ascontiguousarray(U[:, :2])
    C = np.conj(U2.T) @ T @ np.conj(U2)
    detc = C[0, 0] * C[1, 1] - 0.25 * (C[0, 1] + C[1, 0]) ** 2
    r = 1j * np.sqrt(detc + 0j)
    for i in range(N):
        for j in range(N):
            A[i, j] = r * (U2[i, 0] * U2[j, 1] - U2[i, 1] * U2[j, 0])
    return A, s, True


@njit
def choose_sign(A, Wm, Wprev, has_prev):
    """Return (+1 or -1, fallback_used) for W^H = sign * A."""
    dp = np.sqrt(np.sum(np.abs(A - Wm) ** 2))
    dm = np.sqrt(np.sum(np.abs(A + Wm) ** 2))
    if abs(dp - dm) > 0.01 * max(dp, dm):
        return (1.0 if dp <= dm else -1.0), False
    ref = Wprev if has_prev else Wm
    c = np.sum(np.conj(ref) * A).real
    return (1.0 if c >= 0 else -1.0), True


@njit
def _argmax_col(P):
    best = 0
    bn = -1.0
    for c in range(P.shape[1]):
        nrm = np.sum(np.abs(P[:, c]) ** 2)
        if nrm > bn:
            bn = nrm
            best = c
    return best


@njit
def eig_pm(F):
    """(lam, x1, x4, ok) from the rank-2 spectral projectors of F."""
    fn = np.sqrt(np.sum(np.abs(F) ** 2))
    tr = F[0, 0] + F[1, 1] + F[2, 2] + F[3, 3]
    x1 = np.zeros(4, dtype=np.complex128)
    x4 = np.zeros(4, dtype=np.complex128)
    if abs(tr) > 0.1 * fn or fn == 0.0:
        return 0j, x1, x4, False
    F2 = F @ F
    tr2 = F2[0, 0] + F2[1, 1] + F2[2, 2] + F2[3, 3]
    lam = 0.5 * np.sqrt(2 * tr2 - tr * tr + 0j)
    if abs(lam) <= 1e-12 * fn:
        return lam, x1, x4, False
    mu_p = 0.5 * tr + lam
    mu_m = 0.5 * tr - lam
    Pp = F2 - mu_m * F
    Pm = F2 - mu_p * F
    x4[:] = Pp[:, _argmax_col(Pp)]
    x1[:] = Pm[:, _argmax_col(Pm)]
    return lam, x1, x4, True


@njit
def xtilde(p):
    """Normalized coefficient matrix X~ from the parameter vector."""
    X = np.empty((4, 4), dtype=np.complex128)
    a12, b21, a21r, b12r = p[0], p[1], p[2], p[3]
    X[0, 0] = 1.0
    X[1, 0] = a21r
    X[2, 0] = b12r
    X[3, 0] = p[4]
    X[0, 1] = a12
    X[1, 1] = 1.0
    X[2, 1] = a12 * b12r
    X[3, 1] = b12r
    X[0, 2] = b21
    X[1, 2] = b21 * a21r
    X[2, 2] = 1.0
    X[3, 2] = a21r
    X[0, 3] = p[5]
    X[1, 3] = b21
    X[2, 3] = a12
    X[3, 3] = 1.0
    return X


@njit
def _gamma_fit(Xti, M, dl, ithru, gamma_est):
    """LS gamma from the thru-referenced exponent ratios; returns (gamma, unwrap_flag)."""
    N = M.shape[1]
    Y = Xti @ M
    num = 0j
    den = 0.0
    flag = False
    for i in range(N):
        if dl[i] == 0.0:
            continue
        r0 = Y[0, i] / Y[0, ithru]
        r3 = Y[3, i] / Y[3, ithru]
        e = 0.5 * (r3 + 1.0 / r0)
        le = np.log(e)
        t = (gamma_est * dl[i] - le).imag / (2 * np.pi)
        n = np.floor(t + 0.5)
        if abs(abs(t - n) - 0.5) < 0.05:
            flag = True
        phi = le + 2j * np.pi * n
        num += dl[i] * phi
        den += dl[i] * dl[i]
    return num / den, flag


@njit
def _normalize(x1, x4):
    p = np.zeros(NPARAM, dtype=np.complex128)
    s1 = max(np.max(np.abs(x1)), 1e-300)
    s4 = max(np.max(np.abs(x4)), 1e-300)
    if abs(x1[0]) <= 1e-12 * s1 or abs(x4[3]) <= 1e-12 * s4:
        return p, False
    x1n = x1 / x1[0]
    x4n = x4 / x4[3]
    p[0] = x4n[2]
    p[1] = x4n[1]
    p[2] = x1n[1]
    p[3] = x1n[2]
    p[4] = x1n[3]
    p[5] = x4n[0]
    return p, True


@njit
def solve_point(Ms, dl, ithru, ga, gb, grefl_est, gamma_est, refl_ratio, Wprev, has_prev):
    """Calibrate one frequency.

    Ms: (N, 2, 2) raw T-parameter line measurements; dl: thru-referenced lengths;
    ga, gb: raw reflect reflections at ports 1 and 2; grefl_est: reflect estimate;
    gamma_est: propagation-constant estimate; refl_ratio: assumed Gamma_b/Gamma_a.
    Returns (params[10], W^H, status).
    """
    p = np.zeros(NPARAM, dtype=np.complex128)
    N = Ms.shape[0]
    status = 0
    M, d = measurement_matrix(Ms)
    dmax = np.max(np.abs(M)) ** 2
    for i in range(N):
        if abs(d[i]) <= 1e-14 * dmax:
            return p, np.zeros((N, N), dtype=np.complex128), ST_SINGULAR_MEAS
    A, s, ok = data_wh_candidate(M, d)
    if not ok:
        return p, A, ST_DEGENERATE
    Wm = model_wh(dl, gamma_est)
    sgn, fb = choose_sign(A, Wm, Wprev, has_prev)
    if fb:
        status |= ST_SIGN_FALLBACK
    WH = sgn * A
    W = np.conj(WH.T)
    PQ = _pq()
    R = M.T @ PQ
    for i in range(N):
        R[i, :] = R[i, :] / d[i]
    F = M @ W @ R
    lam, x1, x4, ok = eig_pm(F)
    if not ok:
        return p, WH, status | ST_NO_LAMBDA
    for attempt in range(2):
        q, ok = _normalize(x1, x4)
        if not ok:
            return p, WH, status | ST_PIVOT
        Xt = xtilde(q)
        if abs(np.linalg.det(Xt)) <= 1e-13:
            return p, WH, status | ST_SINGULAR_X
        Xti = np.linalg.inv(Xt)
        g, flag = _gamma_fit(Xti, M, dl, ithru, gamma_est)
        if attempt == 0 and abs(-g - gamma_est) < abs(g - gamma_est):
            tmp = x1.copy()
            x1 = x4.copy()
            x4 = tmp
            status |= ST_GAMMA_SWAPPED
            continue
        break
    if flag:
        status |= ST_UNWRAP
    p[:] = q
    p[9] = g
    # thru: vec(M_thru) = k*a11*b11 * x1n + k * x4n (4x2 least squares)
    Bm = np.empty((4, 2), dtype=np.complex128)
    Bm[:, 0] = Xt[:, 0]
    Bm[:, 1] = Xt[:, 3]
    rhs = np.ascontiguousarray(M[:, ithru])
    BmH = np.ascontiguousarray(np.conj(Bm.T))
    sol = np.linalg.solve(BmH @ Bm, BmH @ rhs)
    k = sol[1]
    ab = sol[0] / k
    # reflect
    a12, b21, a21r, b12r = q[0], q[1], q[2], q[3]
    ga_a = (ga - a12) / (1.0 - ga * a21r)        # a11 * Gamma_a
    gb_b = (gb + b21) / (1.0 + gb * b12r)        # b11 * Gamma_b
    a_over_b = ga_a / gb_b * refl_ratio
    a11 = np.sqrt(a_over_b * ab)
    d1 = abs(ga_a / a11 - grefl_est)
    d2 = abs(-ga_a / a11 - grefl_est)
    if abs(d1 - d2) < 1e-6:
        return p, WH, status | ST_REFLECT_AMBIG
    if d2 < d1:
        a11 = -a11
    p[6] = a11
    p[7] = ab / a11
    p[8] = k
    return p, WH, status


@njit
def solve_batch(Ms, dl, ithru, ga, gb, grefl_est, gamma_est, refl_ratio):
    """Independent solves for K points: Ms (K, N, 2, 2), scalars per point (K,)."""
    K = Ms.shape[0]
    N = Ms.shape[1]
    out = np.zeros((K, NPARAM), dtype=np.complex128)
    status = np.zeros(K, dtype=np.int64)
    dummy = np.zeros((N, N), dtype=np.complex128)
    for i in range(K):
        p, WH, st = solve_point(Ms[i], dl, ithru, ga[i], gb[i], grefl_est, gamma_est[i],
                                refl_ratio, dummy, False)
        out[i] = p
        status[i] = st
    return out, status


@njit
def solve_sweep(Ms, dl, ithru, ga, gb, grefl_est, freqs, gamma0, refl_ratio):
    """Frequency sweep with the gamma-estimate chain: each valid point seeds the next.

    The estimate is carried as a constant complex effective permittivity, i.e.
    gamma_est(f) = gamma_prev * f / f_prev.
    """
    K = Ms.shape[0]
    N = Ms.shape[1]
    out = np.zeros((K, NPARAM), dtype=np.complex128)
    status = np.zeros(K, dtype=np.int64)
    gest = np.zeros(K, dtype=np.complex128)
    Wprev = np.zeros((N, N), dtype=np.complex128)
    has_prev = False
    g_prev = gamma0 * freqs[0]  # gamma0 is gamma per Hz
    f_prev = freqs[0]
    for i in range(K):
        ge = g_prev * freqs[i] / f_prev
        gest[i] = ge
        p, WH, st = solve_point(Ms[i], dl, ithru, ga[i], gb[i], grefl_est, ge, refl_ratio,
                                Wprev, has_prev)
        out[i] = p
        status[i] = st
        if st < STATUS_FAIL and (st & ST_FLAGGED) == 0:
            g_prev = p[9]
            f_prev = freqs[i]
            Wprev = WH
            has_prev = True
    return out, status, gest


@njit
def full_x(p):
    X = xtilde(p)
    a11b11 = p[6] * p[7]
    for r in range(4):
        X[r, 0] *= a11b11
        X[r, 1] *= p[7]
        X[r, 2] *= p[6]
    return X


@njit
def apply_batch(params, Mdut):
    """Corrected T-parameters: vec(T) = X^-1 vec(M) / k for each point."""
    K = params.shape[0]
    T = np.zeros((K, 2, 2), dtype=np.complex128)
    for i in range(K):
        X = full_x(params[i])
        v = np.empty(4, dtype=np.complex128)
        v[0] = Mdut[i, 0, 0]
        v[1] = Mdut[i, 1, 0]
        v[2] = Mdut[i, 0, 1]
        v[3] = Mdut[i, 1, 1]
        t = np.linalg.solve(X, v) / params[i, 8]
        T[i, 0, 0] = t[0]
        T[i, 1, 0] = t[1]
        T[i, 0, 1] = t[2]
        T[i, 1, 1] = t[3]
    return T


@njit
def s2t_batch(S):
    T = np.empty_like(S)
    for i in range(S.shape[0]):
        s11, s12, s21, s22 = S[i, 0, 0], S[i, 0, 1], S[i, 1, 0], S[i, 1, 1]
        T[i, 0, 0] = s12 - s11 * s22 / s21
        T[i, 0, 1] = s11 / s21
        T[i, 1, 0] = -s22 / s21
        T[i, 1, 1] = 1.0 / s21
    return T


@njit
def t2s_batch(T):
    S = np.empty_like(T)
    for i in range(T.shape[0]):
        t11, t12, t21, t22 = T[i, 0, 0], T[i, 0, 1], T[i, 1, 0], T[i, 1, 1]
        S[i, 0, 0] = t12 / t22
        S[i, 0, 1] = t11 - t12 * t21 / t22
        S[i, 1, 0] = 1.0 / t22
        S[i, 1, 1] = -t21 / t22
    return S
