import dataclasses

import mpmath
import numpy as np
import pytest

from mtrl_unc import cpw


def test_ellipk_vs_mpmath():
    m = np.linspace(0, 0.999, 100)
    ours = cpw.ellipk(m)
    ref = np.array([float(mpmath.ellipk(x)) for x in m])
    assert np.max(np.abs(ours - ref) / ref) < 1e-13


def test_ellipk_domain():
    assert cpw.ellipk(0.0) == pytest.approx(np.pi / 2, rel=1e-15)
    with pytest.raises(ValueError):
        cpw.ellipk(1.0)
    with pytest.raises(ValueError):
        cpw.ellipk(-0.1)


def test_kk_ratio_limits():
    assert cpw.kk_ratio(1 / np.sqrt(2)) == pytest.approx(1, rel=1e-14)
    k = 1e-6
    assert cpw.kk_ratio(k) == pytest.approx(np.pi / (2 * np.log(4 / k)), rel=1e-9)
    k = np.sqrt(1 - 1e-12)
    assert cpw.kk_ratio(k) == pytest.approx(2 * np.log(4 / np.sqrt(1 - k * k)) / np.pi, rel=1e-9)


def lossless_thin(g):
    return dataclasses.replace(g, t=1e-12, sigma=1e30)


def test_thin_limit_ereff():
    g, _, ereff, _ = cpw.cpw_model(lossless_thin(cpw.TABLE_I), 60e9)
    er = cpw.TABLE_I.er
    assert ereff == pytest.approx((er + 1) / 2, rel=1e-5)


def test_table_i_line_is_bracketed():
    g, z0, ereff, loss = cpw.cpw_model(cpw.TABLE_I, 60e9)
    assert 1 < ereff < (cpw.TABLE_I.er + 1) / 2
    assert 40 < z0.real < 60 and z0.imag < 0
    assert g.real > 0 and loss > 0


def test_loss_decreases_with_conductivity():
    losses = [cpw.cpw_model(dataclasses.replace(cpw.TABLE_I, sigma=s), 60e9)[3]
              for s in (1e7, 2e7, 4e7, 8e7)]
    assert np.all(np.diff(losses) < 0)


def test_loss_grows_with_frequency():
    f = np.linspace(5e9, 150e9, 30)
    _, _, _, loss = cpw.cpw_model(cpw.TABLE_I, f)
    assert np.all(np.diff(loss) > 0)


def test_jacobian_step_halving():
    J1 = cpw.cpw_jacobian(cpw.TABLE_I, 60e9, rel_step=1e-5)
    J2 = cpw.cpw_jacobian(cpw.TABLE_I, 60e9, rel_step=5e-6)
    scale = np.abs(J2).max(axis=1, keepdims=True)
    assert np.max(np.abs(J1 - J2) / scale) < 1e-6


def test_sigma_rank_one_for_single_parameter():
    g = dataclasses.replace(cpw.TABLE_I, u_w=0, u_wg=0, u_s=0, u_t=0, u_sigma=0)
    S = cpw.sigma_gamma_z(g, 60e9)
    w = np.linalg.eigvalsh(S)
    assert np.sum(w > 1e-10 * w.max()) == 1


def test_sigma_scaling_and_psd():
    S1 = cpw.sigma_gamma_z(cpw.TABLE_I, 60e9)
    S2 = cpw.sigma_gamma_z(cpw.TABLE_I.scaled_uncertainties(0.5), 60e9)
    assert np.allclose(S2, S1 / 4, rtol=1e-12, atol=0)
    assert np.linalg.eigvalsh(S1).min() >= -1e-12 * np.trace(S1)


def test_geometry_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        dataclasses.replace(cpw.TABLE_I, w=-1)
    with pytest.raises(ValueError):
        dataclasses.replace(cpw.TABLE_I, er=1.0)
    with pytest.raises(ValueError):
        cpw.CpwGeometry.from_dict({"w": 1, "bogus": 2})
    p = tmp_path / "g.json"
    cpw.TABLE_I.to_json(p)
    assert cpw.CpwGeometry.from_json(p) == cpw.TABLE_I


def test_thick_conductor_rejected():
    with pytest.raises(ValueError, match="thick"):
        cpw.cpw_model(dataclasses.replace(cpw.TABLE_I, t=20e-6), 60e9)
