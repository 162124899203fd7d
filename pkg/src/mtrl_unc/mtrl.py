"""Multiline TRL calibration: measurement system, weighting matrix, eigen-solve,
normalization, denormalization, propagation-constant extraction and DUT correction.

Every step accepts :class:`~mtrl_unc.numkit.UncArray` inputs, so sensitivities
to the registered inputs flow through the whole chain. Plain arrays are wrapped
as constants. The nominal (value-only) counterpart lives in
:mod:`mtrl_unc.kernels`; :class:`MultilineTRL` uses it for the sweep and for
the gamma-estimate chain.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from . import network as nw
from . import numkit as nk

C0 = 299792458.0

P_MAT = np.array([[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=complex)
Q_MAT = np.array([[0, 0, 0, 1], [0, -1, 0, 0], [0, 0, -1, 0], [1, 0, 0, 0]], dtype=complex)
PQ = P_MAT @ Q_MAT
_E = np.array([[0, 1], [-1, 0]], dtype=complex)

PARAM_NAMES = ("a12", "b21", "a21/a11", "b12/b11", "x1n[3]", "x4n[0]", "a11", "b11", "k", "gamma")


class CalibrationError(RuntimeError):
    """Numerical failure of the calibration at a frequency point."""

    def __init__(self, message, status=0, index=None):
        super().__init__(message)
        self.status = status
        self.index = index


# -- conversions between gamma and line quantities -------------------------------------
def gamma_from_ereff(ereff, f):
    """Lossless estimate gamma = j 2 pi f sqrt(ereff) / c0."""
    return 2j * np.pi * np.asarray(f) * np.sqrt(np.asarray(ereff, dtype=complex)) / C0


def ereff_from_gamma(gamma, f):
    """Relative effective permittivity (c0 beta / (2 pi f))^2 (works on UncArray)."""
    beta = nk.imag(gamma) if isinstance(gamma, nk.UncArray) else np.imag(gamma)
    x = beta * (C0 / (2 * np.pi * f))
    return x * x


def loss_db_per_m(gamma):
    alpha = nk.real(gamma) if isinstance(gamma, nk.UncArray) else np.real(gamma)
    return alpha * (20 / np.log(10))


# -- line set ---------------------------------------------------------------------
@dataclass
class LineSet:
    """Line lengths in meters (thru included), thru index and reflect estimate."""
    lengths: np.ndarray
    thru: int = 0
    reflect_estimate: complex = 1.0 + 0j
    ereff_guess: float = 1.0

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=float).ravel()
        if self.lengths.size < 2:
            raise ValueError("at least two lines (including the thru) are required")
        if not 0 <= self.thru < self.lengths.size:
            raise ValueError(f"thru index {self.thru} out of range")
        if not np.any(self.dl != 0):
            raise nk.DegenerateLineSet("all lines have the same length as the thru")
        self.reflect_estimate = complex(self.reflect_estimate)

    @property
    def n(self):
        return self.lengths.size

    @property
    def dl(self):
        return self.lengths - self.lengths[self.thru]


# -- measurement system -------------------------------------------------------------
@dataclass
class CalibrationSystem:
    M: nk.UncArray          # 4 x N column-stacked line measurements
    d: nk.UncArray          # N determinants (diagonal of D)
    R: nk.UncArray          # D^-1 M^T P Q  (N x 4)
    thru: int

    @property
    def n(self):
        return self.M.shape[1]

    def measurement_product(self):
        """Error-box-free N x N matrix D^-1 M^T P Q M (symmetrized)."""
        T = self.R @ self.M
        return (T + T.T) * 0.5


def build_system(line_t, lines):
    """Stack per-line T-measurements (2x2, plain or uncertain) into the system matrices."""
    if len(line_t) != lines.n:
        raise ValueError(f"{len(line_t)} measurements for {lines.n} lines")
    cols = [nk.vec(nk.asunc(m)) for m in line_t]
    M = nk.stack(cols, axis=1)
    dets = [nk.det(nk.asunc(m)) for m in line_t]
    scale = max(np.abs(M.value).max(), 1e-300) ** 2
    for i, d in enumerate(dets):
        if abs(d.value) <= 1e-14 * scale:
            raise CalibrationError(f"singular measurement of line {i}", K.ST_SINGULAR_MEAS)
    d = nk.stack(dets)
    R = (M.T @ PQ) / d.reshape((lines.n, 1))
    return CalibrationSystem(M, d, R, lines.thru)


# -- weighting matrix ---------------------------------------------------------------
def model_weighting(dl, gamma):
    """Model weighting W with W^H = z y^T - y z^T, y = exp(gamma dl), z = exp(-gamma dl)."""
    if isinstance(dl, nk.UncArray) or isinstance(gamma, nk.UncArray):
        y = nk.exp(gamma * dl)
        z = nk.exp(-(gamma * dl))
        n = y.shape[0]
        WH = z.reshape((n, 1)) * y.reshape((1, n)) - y.reshape((n, 1)) * z.reshape((1, n))
        return WH.H
    dl = np.asarray(dl, dtype=float)
    return np.conj(K.model_wh(dl, complex(gamma))).T


def _wh_candidate(T):
    """Smooth sign-ambiguous W^H candidate from the symmetric measurement product T."""
    H = T @ T.H
    Pd, Uk = nk.dominant_projector(H, 2)
    V = Pd @ Uk
    Vp = nk.inv(V.H @ V) @ V.H
    C = Vp @ T @ Vp.T
    return (1j * nk.sqrt(nk.det(C))) * (V @ _E @ V.T)


def weighting_from_measurements(sys, gamma_est, dl, W_prev=None):
    """Data-derived weighting W from the dominant rank-2 structure of the measurements.

    The sign is chosen by the smaller Frobenius distance to the model weighting
    at ``gamma_est``; if both distances agree within 1% a warning is issued and
    the sign that correlates with ``W_prev`` (previous frequency) or with the
    model is used. Returns ``(W, info)``.
    """
    T = sys.measurement_product()
    s = np.linalg.svd(T.value, compute_uv=False)
    if s[0] == 0 or s[1] <= 1e-10 * s[0]:
        raise nk.DegenerateLineSet("degenerate line set: rank-2 structure missing")
    A = _wh_candidate(T)
    Wm_h = np.conj(model_weighting(dl, gamma_est)).T
    prev_h = None if W_prev is None else np.conj(nk.value_of(W_prev)).T
    sgn, fallback = K.choose_sign(A.value, Wm_h, prev_h if prev_h is not None else Wm_h, prev_h is not None)
    if fallback:
        warnings.warn("weighting-matrix sign test inconclusive; using continuity fallback", RuntimeWarning)
    WH = A * sgn
    info = {"s": s, "s3": float(s[2]) if len(s) > 2 else 0.0, "sign_fallback": bool(fallback)}
    return WH.H, info


def solve_eigensystem(sys, W):
    """F = M W D^-1 M^T P Q and its (lam, x1, x4)."""
    F = sys.M @ nk.asunc(W) @ sys.R
    try:
        return nk.eig_pm_lambda(F) + (F,)
    except ValueError as exc:
        raise CalibrationError(str(exc), K.ST_NO_LAMBDA) from exc


# -- coefficients -------------------------------------------------------------------
def normalize(x1, x4):
    """Normalized eigenvectors -> the six normalized parameters (UncArray of shape (6,))."""
    x1 = nk.asunc(x1)
    x4 = nk.asunc(x4)
    if abs(x1.value[0]) <= 1e-12 * np.abs(x1.value).max() or abs(x4.value[3]) <= 1e-12 * np.abs(x4.value).max():
        raise CalibrationError("vanishing normalization pivot", K.ST_PIVOT)
    x1n = x1 / x1[0]
    x4n = x4 / x4[3]
    return nk.stack([x4n[2], x4n[1], x1n[1], x1n[2], x1n[3], x4n[0]])


def xtilde(p):
    """Normalized coefficient matrix X~ (4x4) from the first six parameters."""
    p = nk.asunc(p)
    one = nk.const(1.0, p.n)
    a12, b21, a21r, b12r = p[0], p[1], p[2], p[3]
    cols = [
        nk.stack([one, a21r, b12r, p[4]]),
        nk.stack([a12, one, a12 * b12r, b12r]),
        nk.stack([b21, b21 * a21r, one, a21r]),
        nk.stack([p[5], b21, a12, one]),
    ]
    return nk.stack(cols, axis=1)


def extract_gamma(Xt, sys, dl, gamma_est):
    """Least-squares gamma from thru-referenced exponent ratios of X~^-1 M.

    Returns ``(gamma, unwrap_flag)``; the integer phase offsets are fixed by
    ``gamma_est`` and a flag is raised if any offset is within 10% of a tie.
    """
    try:
        Y = nk.inv(Xt) @ sys.M
    except nk.SingularMatrixError as exc:
        raise CalibrationError(str(exc), K.ST_SINGULAR_X) from exc
    dl = nk.asunc(dl)
    t = sys.thru
    num, den = 0, 0
    flag = False
    for i in range(sys.n):
        if dl.value[i] == 0:
            continue
        r0 = Y[0, i] / Y[0, t]
        r3 = Y[3, i] / Y[3, t]
        le = nk.log((r3 + 1 / r0) * 0.5)
        q = (gamma_est * dl.value[i].real - le.value).imag / (2 * np.pi)
        n = np.floor(q + 0.5)
        flag |= abs(abs(q - n) - 0.5) < 0.05
        phi = le + 2j * np.pi * n
        num = num + dl[i] * phi
        den = den + dl[i] * dl[i]
    return num / den, bool(flag)


def denormalize(Xt, p, m_thru_vec, ga, gb, gamma_reflect, refl_ratio=1.0):
    """Solve (a11, b11, k) from the thru (4x2 least squares) and the reflect.

    ``ga`` and ``gb`` are the raw reflect reflections at ports 1 and 2,
    ``refl_ratio`` the assumed Gamma_b / Gamma_a (1 for a symmetric reflect).
    The square-root sign is chosen so that the recovered reflect is closest
    to ``gamma_reflect``.
    """
    Bm = nk.stack([Xt[:, 0], Xt[:, 3]], axis=1)
    BmH = Bm.H
    sol = nk.inv(BmH @ Bm) @ (BmH @ m_thru_vec)
    k = sol[1]
    ab = sol[0] / k
    a12, b21, a21r, b12r = p[0], p[1], p[2], p[3]
    ga_a = (ga - a12) / (1 - ga * a21r)
    gb_b = (gb + b21) / (1 + gb * b12r)
    a11 = nk.sqrt(ga_a / gb_b * refl_ratio * ab)
    gv = complex(gamma_reflect)
    d1 = abs(ga_a.value / a11.value - gv)
    d2 = abs(-ga_a.value / a11.value - gv)
    if abs(d1 - d2) < 1e-6:
        raise CalibrationError("reflect estimate too ambiguous", K.ST_REFLECT_AMBIG)
    if d2 < d1:
        a11 = -a11
    return a11, ab / a11, k


def assemble_params(p6, a11, b11, k, gamma):
    return nk.stack([p6[0], p6[1], p6[2], p6[3], p6[4], p6[5], a11, b11, k, gamma])


def full_x(params):
    """X = X~ diag(a11 b11, b11, a11, 1)."""
    params = nk.asunc(params)
    Xt = xtilde(params)
    scale = nk.stack([params[6] * params[7], params[7], params[6], nk.const(1.0, params.n)])
    return Xt * scale.reshape((1, 4))


def apply_calibration(params, m_dut):
    """Corrected DUT S-parameters from a 2x2 raw T-measurement."""
    X = full_x(params)
    try:
        t = (nk.inv(X) @ nk.vec(nk.asunc(m_dut))) / nk.asunc(params)[8]
    except nk.SingularMatrixError as exc:
        raise CalibrationError(str(exc), K.ST_SINGULAR_X) from exc
    return nw.t_to_s(nk.unvec(t, (2, 2)))


def shift_reference_plane(params, offset):
    """Move both reference planes by ``offset`` meters away from their port.

    a11 and b11 scale by exp(-2 gamma offset) and k by exp(2 gamma offset); the
    normalized parameters are unchanged. ``offset`` may be uncertain.
    """
    params = nk.asunc(params)
    g = params[9]
    e = nk.exp(g * offset * (-2))
    out = [params[i] for i in range(6)] + [params[6] * e, params[7] * e, params[8] / e, g]
    return nk.stack(out)


# -- single-point calibration --------------------------------------------------------
@dataclass
class PointResult:
    params: nk.UncArray
    lam: object
    W: object
    s3: float = 0.0
    status: int = 0


def calibrate_point(line_t, dl, lines, ga, gb, gamma_est, refl_ratio=1.0, W_prev=None):
    """Full uncertain calibration at one frequency.

    ``line_t``: per-line 2x2 T-measurements; ``dl``: thru-referenced lengths
    (plain or uncertain); ``ga``, ``gb``: raw reflect reflections.
    """
    status = 0
    sys = build_system(line_t, lines)
    W, info = weighting_from_measurements(sys, gamma_est, nk.value_of(dl).real, W_prev)
    if info["sign_fallback"]:
        status |= K.ST_SIGN_FALLBACK
    lam, x1, x4, _ = solve_eigensystem(sys, W)
    p6 = normalize(x1, x4)
    Xt = xtilde(p6)
    gamma, flag = extract_gamma(Xt, sys, dl, gamma_est)
    if abs(-gamma.value - gamma_est) < abs(gamma.value - gamma_est):
        status |= K.ST_GAMMA_SWAPPED
        lam = -lam
        p6 = normalize(x4, x1)
        Xt = xtilde(p6)
        gamma, flag = extract_gamma(Xt, sys, dl, gamma_est)
    if flag:
        status |= K.ST_UNWRAP
        warnings.warn("phase unwrap ambiguous: a line phase is near a half-cycle tie", RuntimeWarning)
    ratio = refl_ratio(gamma) if callable(refl_ratio) else refl_ratio
    a11, b11, k = denormalize(Xt, p6, sys.M[:, sys.thru], ga, gb, lines.reflect_estimate, ratio)
    params = assemble_params(p6, a11, b11, k, gamma)
    return PointResult(params, lam, W, info["s3"], status)


# -- sweep-level nominal calibration ------------------------------------------------
@dataclass
class CalibrationSolution:
    """Per-frequency calibration parameters (see :data:`PARAM_NAMES`) and optional covariance.

    ``cov`` holds the 20x20 real-split (vecRI style) covariance of the ten
    complex parameters at each frequency.
    """
    frequencies: np.ndarray
    params: np.ndarray
    status: np.ndarray
    gamma_est: np.ndarray = None
    cov: np.ndarray = None
    lines: LineSet = None
    extra: dict = field(default_factory=dict)

    @property
    def valid(self):
        return K.is_valid(self.status)

    @property
    def gamma(self):
        return self.params[:, 9]

    @property
    def ereff(self):
        return ereff_from_gamma(self.gamma, self.frequencies)

    @property
    def loss_db(self):
        return loss_db_per_m(self.gamma)

    def flagged(self):
        return [(i, float(f), K.describe_status(int(s)))
                for i, (f, s) in enumerate(zip(self.frequencies, self.status)) if not K.is_valid(s)]

    def apply(self, dut):
        """Nominal correction of a DUT record (raw S) -> corrected S array (F, 2, 2)."""
        t = K.apply_batch(np.ascontiguousarray(self.params), np.ascontiguousarray(nw.s_to_t(dut.s)))
        return nw.t_to_s(t)

    def shifted(self, offset):
        p = self.params.copy()
        e = np.exp(-2 * p[:, 9] * offset)
        p[:, 6] *= e
        p[:, 7] *= e
        p[:, 8] /= e
        return CalibrationSolution(self.frequencies, p, self.status.copy(), self.gamma_est, None, self.lines)


class MultilineTRL:
    """Nominal multiline TRL over a frequency sweep.

    ``lines``: list of TwoPortRecord (raw S) in LineSet order; ``reflect``: raw
    S-record of the reflect (only S11 and S22 are used).
    """

    def __init__(self, lines_data, reflect, lineset, reflect_ratio=1.0):
        self.lines_data = list(lines_data)
        self.reflect = reflect
        self.lineset = lineset
        self.reflect_ratio = complex(reflect_ratio)
        f = self.lines_data[0].frequencies
        for rec in self.lines_data[1:] + [reflect]:
            if rec.frequencies.shape != f.shape or not np.allclose(rec.frequencies, f, rtol=1e-12, atol=0):
                raise ValueError("all standards must share the same frequency grid")
        if len(self.lines_data) != lineset.n:
            raise ValueError(f"{len(self.lines_data)} line files for {lineset.n} line lengths")
        self.frequencies = f

    def measurements(self):
        """Raw T-measurements, shape (F, N, 2, 2)."""
        return np.ascontiguousarray(np.stack([nw.s_to_t(r.s) for r in self.lines_data], axis=1))

    def run(self):
        f = self.frequencies
        Ms = self.measurements()
        ga = np.ascontiguousarray(self.reflect.s[:, 0, 0])
        gb = np.ascontiguousarray(self.reflect.s[:, 1, 1])
        g0 = complex(gamma_from_ereff(self.lineset.ereff_guess, 1.0))
        params, status, gest = K.solve_sweep(Ms, self.lineset.dl, self.lineset.thru, ga, gb,
                                             self.lineset.reflect_estimate, f, g0, self.reflect_ratio)
        return CalibrationSolution(f, params, status, gest, None, self.lineset)
