"""Line-mismatch (inverse-model) covariance of the line measurements."""

import numpy as np

from . import mtrl
from . import numkit as nk


def gamma_reflection_from_impedance(dz, z_mean):
    """Reflection between a line of impedance z_mean + dz and the nominal z_mean."""
    den = 2 * z_mean + dz
    if np.any(np.abs(nk.value_of(den)) <= 1e-12 * np.abs(nk.value_of(z_mean))):
        raise ZeroDivisionError("2*z_mean + dz vanishes")
    return dz / den


def mismatched_line_t(G, gamma, length):
    """T-parameters of a line of length ``length`` whose impedance mismatch is ``G``.

    (1 / (1 - G^2)) [[1, G], [G, 1]] diag(exp(-gl), exp(gl)) [[1, -G], [-G, 1]];
    works on plain values and UncArray.
    """
    unc = any(isinstance(x, nk.UncArray) for x in (G, gamma, length))
    if not unc:
        G = complex(G)
        if abs(G) >= 1 - 1e-9:
            raise ValueError("|Gamma| must be below 1")
        e = np.exp(-complex(gamma) * length)
        a = np.array([[1, G], [G, 1]])
        b = np.array([[1, -G], [-G, 1]])
        return a @ np.diag([e, 1 / e]) @ b / (1 - G * G)
    G, gamma, length = nk._common(G, gamma, length)
    if abs(G.value) >= 1 - 1e-9:
        raise ValueError("|Gamma| must be below 1")
    e = nk.exp(-(gamma * length))
    ei = 1 / e
    s = 1 / (1 - G * G)
    # expanded product of the sandwich
    t11 = (e - G * G * ei) * s
    t12 = (G * ei - G * e) * s
    t21 = (G * e - G * ei) * s
    t22 = (ei - G * G * e) * s
    return nk.stack([nk.stack([t11, t12]), nk.stack([t21, t22])])


def mismatch_map(params, dl, G, gamma):
    """Raw line measurement k X vec(L'(G, gamma, dl)) as a 4-vector."""
    X = mtrl.full_x(params)
    L = mismatched_line_t(G, gamma, dl)
    return (X @ nk.vec(L)) * nk.asunc(params)[8]


def sigma_I_for_line(params, dl, sigma_gg, gamma=None):
    """8x8 vecRI covariance of one line measurement caused by line mismatch.

    ``params``: nominal calibration parameters (10 complex, see
    :data:`mtrl_unc.mtrl.PARAM_NAMES`); ``dl``: thru-referenced length;
    ``sigma_gg``: 4x4 covariance of (Re Gamma, Im Gamma, Re gamma, Im gamma).
    The Jacobian is evaluated at Gamma = 0 and at the calibrated gamma.
    """
    params = np.asarray(params, dtype=complex)
    if not np.all(np.isfinite(params)):
        raise ValueError("invalid calibration at this frequency")
    g = params[9] if gamma is None else complex(gamma)
    sigma_gg = nk.check_psd(sigma_gg, "Sigma_Gamma_gamma")
    reg = nk.InputRegistry()
    sid = reg.register_input("Gamma,gamma", [0.0, 0.0, g.real, g.imag], sigma_gg)
    v = reg.complex(sid)
    m = mismatch_map(params, float(dl), v[0], v[1])
    return nk.covariance(m, reg)
