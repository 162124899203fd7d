import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_point, solve
from mtrl_unc import mismatch
from mtrl_unc import network as nw
from mtrl_unc import numkit as nk


def abcd_line_s(z1, z0, gamma, length):
    """S-parameters (reference z0) of a uniform line of impedance z1 via its ABCD matrix."""
    ch, sh = np.cosh(gamma * length), np.sinh(gamma * length)
    A, B, C, D = ch, z1 * sh, sh / z1, ch
    den = A + B / z0 + C * z0 + D
    return np.array([[(A + B / z0 - C * z0 - D) / den, 2 * (A * D - B * C) / den],
                     [2 / den, (-A + B / z0 - C * z0 + D) / den]])


def test_matched_line_is_diagonal():
    g, l = 20 + 1500j, 1e-3
    assert np.allclose(mismatch.mismatched_line_t(0, g, l), np.diag([np.exp(-g * l), np.exp(g * l)]),
                       rtol=1e-14, atol=0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0, 5e-3))
def test_mismatched_line_unit_determinant(gr, gi, l):
    T = mismatch.mismatched_line_t(gr + 1j * gi, 20 + 1500j, l)
    assert abs(np.linalg.det(T) - 1) < 1e-12 * np.abs(T).max() ** 2


@pytest.mark.parametrize("z1", [45.0, 55 + 2j, 60 - 1j])
def test_mismatched_line_matches_abcd_cascade(z1):
    z0, g, l = 50.0, 30 + 2500j, 1.8e-3
    G = mismatch.gamma_reflection_from_impedance(z1 - z0, z0)
    assert abs(G - (z1 - z0) / (z1 + z0)) < 1e-15
    T = mismatch.mismatched_line_t(G, g, l)
    T_ref = nw.s_to_t(abcd_line_s(z1, z0, g, l))
    assert np.max(np.abs(T - T_ref)) < 1e-12 * np.abs(T_ref).max()


def test_uncertain_line_t_matches_plain():
    reg = nk.InputRegistry()
    v = reg.complex(reg.register_input("v", [0.05, -0.02, 20.0, 1500.0], np.eye(4) * 1e-4))
    Tu = mismatch.mismatched_line_t(v[0], v[1], 1e-3)
    assert np.max(np.abs(Tu.value - mismatch.mismatched_line_t(0.05 - 0.02j, 20 + 1500j, 1e-3))) < 1e-14


def test_reflection_derivative_at_match():
    z = 49.2 - 0.3j
    h = 1e-6
    d = (mismatch.gamma_reflection_from_impedance(h, z) - mismatch.gamma_reflection_from_impedance(-h, z)) / (2 * h)
    assert abs(d - 1 / (2 * z)) < 1e-9
    with pytest.raises(ZeroDivisionError):
        mismatch.gamma_reflection_from_impedance(-100.0, 50.0)


SIG_GG = np.diag([0.02, 0.015, 2.0, 30.0]) ** 2


def calibrated(seed=0, N=3):
    pt = make_point(np.random.default_rng(seed), N=N, f=60e9)
    p, _, _ = solve(pt)
    return pt, p


def test_sigma_I_zero_input():
    pt, p = calibrated()
    assert np.array_equal(mismatch.sigma_I_for_line(p, pt["dl"][1], np.zeros((4, 4))), np.zeros((8, 8)))


def test_sigma_I_thru_is_zero():
    _, p = calibrated()
    assert np.max(np.abs(mismatch.sigma_I_for_line(p, 0.0, SIG_GG))) < 1e-20


def test_sigma_I_quadratic_scaling():
    pt, p = calibrated()
    s1 = mismatch.sigma_I_for_line(p, pt["dl"][2], SIG_GG)
    s3 = mismatch.sigma_I_for_line(p, pt["dl"][2], 9 * SIG_GG)
    assert np.max(np.abs(s3 - 9 * s1)) <= 1e-12 * np.abs(s3).max()


def test_sigma_I_is_psd_and_rank_limited():
    pt, p = calibrated()
    s = mismatch.sigma_I_for_line(p, pt["dl"][2], SIG_GG)
    w = np.linalg.eigvalsh(s)
    assert w.min() >= -1e-12 * w.max()
    assert np.sum(w > 1e-10 * w.max()) <= 4


def sample_sigma_I(p, dl, sig, n, seed):
    rng = np.random.default_rng(seed)
    g = p[9]
    r = rng.multivariate_normal([0, 0, g.real, g.imag], sig, size=n)
    X = np.asarray(nk.value_of(mismatch.mtrl.full_x(p)))
    out = np.empty((n, 8))
    for i, (a, b, c, d) in enumerate(r):
        L = mismatch.mismatched_line_t(a + 1j * b, c + 1j * d, dl)
        out[i] = nk.real_split(p[8] * X @ L.ravel(order="F"))
    return np.cov(out.T)


def sigma_I_agreement(lin, samp):
    """Worst error over entries: relative for strongly correlated pairs, correlation scale otherwise."""
    d = np.sqrt(np.diag(lin))
    scale = np.outer(d, d)
    rho = np.abs(lin) / scale
    strong = rho >= 0.5
    e_rel = np.max(np.abs(samp - lin)[strong] / np.abs(lin)[strong])
    e_norm = np.max(np.abs(samp - lin)[~strong] / scale[~strong]) if np.any(~strong) else 0.0
    return e_rel, e_norm


def test_sigma_I_vs_sampling():
    pt, p = calibrated(seed=7)
    dl = pt["dl"][2]
    lin = mismatch.sigma_I_for_line(p, dl, SIG_GG)
    samp = sample_sigma_I(p, dl, SIG_GG, 5000, seed=11)
    e_rel, e_norm = sigma_I_agreement(lin, samp)
    assert e_rel < 0.10 and e_norm < 0.10
