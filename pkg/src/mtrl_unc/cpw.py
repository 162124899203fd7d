"""Quasi-TEM coplanar-waveguide model (finite ground, finite thickness, skin-effect loss).

Conformal-mapping capacitance with the lower (substrate) half on nominal
dimensions and the upper (air) half on thickness-widened dimensions, plus an
Owyang-Wu style conductor resistance. Substrate is infinitely thick and lossless.
"""

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

EPS0 = 8.8541878128e-12
MU0 = 1.25663706212e-6
C0 = 299792458.0

PARAMS = ("w", "wg", "s", "t", "er", "sigma")


def _agm(a, b):
    for _ in range(60):
        a, b = (a + b) / 2, np.sqrt(a * b)
        if np.all(np.abs(a - b) <= 1e-16 * a):
            break
    return a


def ellipk(m):
    """Complete elliptic integral of the first kind K(m), parameter m = k^2, via the AGM."""
    m = np.asarray(m, dtype=float)
    if np.any((m < 0) | (m >= 1)) or not np.all(np.isfinite(m)):
        raise ValueError("ellipk requires 0 <= m < 1")
    return np.pi / (2 * _agm(np.ones_like(m), np.sqrt(1 - m)))


def kk_ratio(k):
    """K(k) / K(k') for modulus k (k' = sqrt(1 - k^2)).

    Uses K(k) = pi / (2 AGM(1, k')) so neither modulus goes through 1 - k^2.
    """
    k = np.asarray(k, dtype=float)
    if np.any((k <= 0) | (k >= 1)):
        raise ValueError("kk_ratio requires 0 < k < 1")
    kp = np.sqrt((1 - k) * (1 + k))
    return _agm(np.ones_like(k), k) / _agm(np.ones_like(k), kp)


@dataclass
class CpwGeometry:
    """Cross-section in SI units with per-parameter standard uncertainties (``u_*``)."""
    w: float
    wg: float
    s: float
    t: float
    er: float
    sigma: float
    u_w: float = 0.0
    u_wg: float = 0.0
    u_s: float = 0.0
    u_t: float = 0.0
    u_er: float = 0.0
    u_sigma: float = 0.0

    def __post_init__(self):
        for name in PARAMS:
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"CPW parameter {name} must be positive, got {v}")
            u = getattr(self, "u_" + name)
            if not np.isfinite(u) or u < 0:
                raise ValueError(f"uncertainty of {name} must be >= 0, got {u}")
        if self.er <= 1:
            raise ValueError("substrate permittivity must exceed 1")

    def vector(self):
        return np.array([getattr(self, n) for n in PARAMS])

    def uncertainties(self):
        return np.array([getattr(self, "u_" + n) for n in PARAMS])

    def with_values(self, v):
        d = asdict(self)
        d.update(dict(zip(PARAMS, map(float, v))))
        return CpwGeometry(**d)

    def scaled_uncertainties(self, c):
        d = asdict(self)
        for n in PARAMS:
            d["u_" + n] *= c
        return CpwGeometry(**d)

    def to_json(self, path=None):
        doc = asdict(self)
        if path is None:
            return json.dumps(doc, indent=1)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown CPW geometry fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# alumina calibration-substrate lines used throughout the examples and tests
TABLE_I = CpwGeometry(w=49.1e-6, wg=273.3e-6, s=25.5e-6, t=4.9e-6, er=9.9, sigma=4.11e7,
                      u_w=2.55e-6, u_wg=2.55e-6, u_s=2.55e-6, u_t=0.49e-6, u_er=0.2, u_sigma=0.41e7)


def _k_finite_ground(w, s, wg):
    k0 = w / (w + 2 * s)
    c = w + 2 * s + 2 * wg
    return k0 * np.sqrt((1 - ((w + 2 * s) / c) ** 2) / (1 - (w / c) ** 2))


def line_parameters(geom, f):
    """Per-unit-length R, L, G, C at frequency ``f`` (array-friendly in f)."""
    w, wg, s, t, er, sig = geom.vector()
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0):
        raise ValueError("frequency must be positive")
    omega = 2 * np.pi * f
    dt = 1.25 * t / np.pi * (1 + np.log(4 * np.pi * w / t))
    if dt >= s or dt >= wg:
        raise ValueError("conductor too thick for the gap (thickness correction exceeds gap)")
    f_low = kk_ratio(_k_finite_ground(w, s, wg))
    f_up = kk_ratio(_k_finite_ground(w + dt, s - dt, wg - dt))
    C = 2 * EPS0 * (er * f_low + f_up)
    C_air = 2 * EPS0 * (f_low + f_up)
    L_ext = MU0 * EPS0 / C_air
    a = w / 2
    b = a + s
    k = a / b
    Rs = np.sqrt(omega * MU0 / (2 * sig))
    Kk = ellipk(k * k)
    term = (np.pi + np.log(8 * np.pi * a * (1 - k) / (t * (1 + k)))) / a \
        + (np.pi + np.log(8 * np.pi * b * (1 - k) / (t * (1 + k)))) / b
    R = Rs * term / (8 * Kk ** 2 * (1 - k * k))
    L = L_ext + R / omega
    return R, L, 0.0 * R, C


def cpw_model(geom, f):
    """(gamma [1/m], Z0 [ohm], ereff, loss [dB/m]) at frequency ``f``."""
    R, L, G, C = line_parameters(geom, f)
    omega = 2 * np.pi * np.asarray(f, dtype=float)
    zs = R + 1j * omega * L
    yp = G + 1j * omega * C
    gamma = np.sqrt(zs * yp)
    z0 = np.sqrt(zs / yp)
    ereff = (C0 * gamma.imag / omega) ** 2
    loss = 20 * gamma.real / np.log(10)
    return gamma, z0, ereff, loss


def cpw_jacobian(geom, f, rel_step=1e-6, abs_floor=1e-12):
    """Central-difference Jacobian of (Re g, Im g, Re Z0, Im Z0) w.r.t. (w, wg, s, t, er, sigma).

    Returns a (4, 6) array (scalar ``f``).
    """
    v0 = geom.vector()
    J = np.empty((4, len(PARAMS)))
    for j in range(len(PARAMS)):
        h = max(rel_step * abs(v0[j]), abs_floor)
        vp = v0.copy()
        vm = v0.copy()
        vp[j] += h
        vm[j] -= h
        gp, zp, _, _ = cpw_model(geom.with_values(vp), f)
        gm, zm, _, _ = cpw_model(geom.with_values(vm), f)
        d = np.array([gp.real - gm.real, gp.imag - gm.imag, zp.real - zm.real, zp.imag - zm.imag]) / (2 * h)
        if not np.all(np.isfinite(d)):
            raise ValueError(f"non-finite CPW model output while probing {PARAMS[j]}")
        J[:, j] = d
    return J


def sigma_gamma_z(geom, f, rel_step=1e-6):
    """4x4 covariance of (Re Gamma, Im Gamma, Re gamma, Im gamma) for one line.

    Gamma is the impedance mismatch against the nominal line, linearized at
    match: dGamma = dZ / (2 Z0).
    """
    _, z0, _, _ = cpw_model(geom, f)
    J = cpw_jacobian(geom, f, rel_step)
    dz = J[2] + 1j * J[3]
    dG = dz / (2 * complex(z0))
    Jg = np.vstack([dG.real, dG.imag, J[0], J[1]])
    u = geom.uncertainties()
    S = Jg @ np.diag(u ** 2) @ Jg.T
    return (S + S.T) / 2
