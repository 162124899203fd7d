import numpy as np
import pytest

from mtrl_unc import kernels as K
from mtrl_unc import mc
from mtrl_unc import network as nw

C0 = 299792458.0


def random_box(rng, spread=0.4):
    A = np.eye(2) + spread * (rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)))
    A = A * np.exp(1j * rng.uniform(-np.pi, np.pi))
    return A / A[1, 1]


def random_gamma(rng, f):
    er = rng.uniform(3, 10)
    alpha = rng.uniform(2, 60) * np.sqrt(f / 50e9)
    return alpha + 2j * np.pi * f * np.sqrt(er) / C0


def line_matrix(gamma, length):
    return np.diag([np.exp(-gamma * length), np.exp(gamma * length)])


def make_point(rng, N=3, f=50e9, lengths=None, gamma=None, reflect=None, dut=None):
    """One noiseless synthetic frequency point (values only)."""
    if lengths is None:
        lengths = np.concatenate([[0.0], np.sort(rng.uniform(0.15e-3, 2.5e-3, N - 1))])
    lengths = np.asarray(lengths, float)
    A, B = random_box(rng), random_box(rng)
    k = (rng.uniform(0.3, 1.5)) * np.exp(1j * rng.uniform(-np.pi, np.pi))
    g = random_gamma(rng, f) if gamma is None else gamma
    dl = lengths - lengths[0]
    Ms = np.stack([k * A @ line_matrix(g, d) @ B for d in dl])
    G = 0.95 * np.exp(-1j * np.deg2rad(10)) if reflect is None else reflect
    ga, gb = mc.reflect_raw(A, B, G, G)
    if dut is None:
        x = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        dut = 0.3 * x + np.array([[0, 0.8], [0.8, 0]])
    Mdut = k * A @ nw.s_to_t(dut) @ B
    return dict(A=A, B=B, k=k, gamma=g, lengths=lengths, dl=dl, Ms=Ms, ga=complex(ga), gb=complex(gb),
                G=G, dut=dut, Mdut=Mdut, f=f)


def solve(pt, gamma_est=None, refl_est=1.0):
    ge = pt["gamma"] * 1.03 if gamma_est is None else gamma_est
    N = len(pt["dl"])
    p, WH, st = K.solve_point(np.ascontiguousarray(pt["Ms"]), pt["dl"], 0, pt["ga"], pt["gb"], complex(refl_est),
                              complex(ge), 1.0 + 0j, np.zeros((N, N), complex), False)
    return p, WH, st


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)
