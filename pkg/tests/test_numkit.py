import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtrl_unc import numkit as nk


def fd_jacobian(fun, r0, h=1e-6):
    """Central differences of a complex-valued map of a real vector -> interleaved real rows."""
    cols = []
    for k in range(r0.size):
        step = h * max(1.0, abs(r0[k]))
        rp, rm = r0.copy(), r0.copy()
        rp[k] += step
        rm[k] -= step
        d = (np.asarray(fun(rp)) - np.asarray(fun(rm))) / (2 * step)
        cols.append(nk.real_split(d))
    return np.stack(cols, axis=1)


def cplx(r, shape):
    return (r[0::2] + 1j * r[1::2]).reshape(shape, order="F")


def engine_jac(build, r0, shape):
    reg = nk.InputRegistry()
    sid = reg.register_input("x", r0, np.eye(r0.size))
    x = reg.complex(sid, shape)
    return nk.jacobian(build(x))


def test_register_unit_rows():
    reg = nk.InputRegistry()
    sid = reg.register_input("a", [1.0, 2.0], np.eye(2))
    x = reg.real(sid)
    assert np.array_equal(x.grad.real, np.eye(2))
    assert reg.dim == 2


def test_register_rejects_zero_dim_and_non_psd():
    reg = nk.InputRegistry()
    with pytest.raises(ValueError):
        reg.register_input("z", [], [])
    with pytest.raises(ValueError):
        reg.register_input("bad", [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        reg.register_input("nonsym", [0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


def test_registry_frozen_after_use():
    reg = nk.InputRegistry()
    sid = reg.register_input("a", [1.0], 1.0)
    reg.real(sid)
    with pytest.raises(RuntimeError):
        reg.register_input("b", [1.0], 1.0)


def test_identity_map_reproduces_sample_block(rng):
    X = rng.normal(size=(50, 8))
    cov = np.cov(X.T)
    reg = nk.InputRegistry()
    sid = reg.register_input("S", rng.normal(size=8), cov)
    S = reg.complex(sid, (2, 2))
    assert np.allclose(nk.covariance(nk.vec(S), reg), cov, rtol=0, atol=1e-15)


def test_square_chain_rule():
    reg = nk.InputRegistry()
    a = reg.real(reg.register_input("a", [3.0], 1.0))[0]
    y = a * a
    assert y.value == 9
    assert y.grad[0] == 6
    assert nk.covariance(y, reg, real_valued=True)[0, 0] == pytest.approx(36)


def test_vec_column_stacking():
    m = nk.const(np.array([[1, 2], [3, 4]]))
    assert np.array_equal(nk.vec(m).value, [1, 3, 2, 4])
    assert np.array_equal(nk.unvec(nk.vec(m), (2, 2)).value, m.value)


def test_det_grad_vs_fd(rng):
    r0 = rng.normal(size=32)
    J = engine_jac(nk.det, r0, (4, 4))
    Jfd = fd_jacobian(lambda r: np.linalg.det(cplx(r, (4, 4))), r0)
    assert np.max(np.abs(J - Jfd)) / np.max(np.abs(J)) < 1e-6


OPS = {
    "add": (lambda x: x[0] + x[1] * (2 - 1j), lambda z: z[0] + z[1] * (2 - 1j)),
    "sub": (lambda x: x[0] - x[1], lambda z: z[0] - z[1]),
    "mul": (lambda x: x[0] * x[1] * x[2], lambda z: z[0] * z[1] * z[2]),
    "div": (lambda x: x[0] / (x[1] + 3), lambda z: z[0] / (z[1] + 3)),
    "rdiv": (lambda x: 2 / (x[1] + 3), lambda z: 2 / (z[1] + 3)),
    "conj": (lambda x: nk.conj(x[0]) * x[1], lambda z: np.conj(z[0]) * z[1]),
    "exp": (lambda x: nk.exp(x[0] * 0.5), lambda z: np.exp(z[0] * 0.5)),
    "log": (lambda x: nk.log(x[0] + 4), lambda z: np.log(z[0] + 4)),
    "sqrt": (lambda x: nk.sqrt(x[1] + 4), lambda z: np.sqrt(z[1] + 4)),
    "abs": (lambda x: nk.absolute(x[2]), lambda z: np.abs(z[2])),
    "pow": (lambda x: (x[0] + 4) ** 1.5, lambda z: (z[0] + 4) ** 1.5),
    "matmul": (lambda x: x.reshape((2, 2)) @ x.reshape((2, 2)).T, lambda z: z.reshape(2, 2) @ z.reshape(2, 2).T),
    "inv": (lambda x: nk.inv(x.reshape((2, 2)) + np.eye(2) * 3), lambda z: np.linalg.inv(z.reshape(2, 2) + 3 * np.eye(2))),
    "det": (lambda x: nk.det(x.reshape((2, 2))), lambda z: np.linalg.det(z.reshape(2, 2))),
    "kron": (lambda x: nk.kron(x[:2].reshape((1, 2)), x[2:].reshape((2, 1))),
             lambda z: np.kron(z[:2].reshape(1, 2), z[2:].reshape(2, 1))),
    "trace": (lambda x: nk.trace(x.reshape((2, 2)) @ x.reshape((2, 2))), lambda z: np.trace(z.reshape(2, 2) @ z.reshape(2, 2))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_uc_ops_vs_fd(name):
    """Engine gradients vs central differences on 100 random inputs per operation."""
    build, ref = OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for _ in range(100):
        r0 = rng.normal(size=8) * 0.8
        reg = nk.InputRegistry()
        x = reg.complex(reg.register_input("x", r0, np.eye(8)))
        y = build(x)
        J = nk.jacobian(y)
        Jfd = fd_jacobian(lambda r: ref(r[0::2] + 1j * r[1::2]), r0)
        if name == "abs":
            J = nk.jacobian(y, real_valued=True)
            Jfd = Jfd[0::2]
        worst = max(worst, np.max(np.abs(J - Jfd)) / max(np.max(np.abs(J)), 1e-12))
    assert worst < 1e-5


def test_propagate_covariance_examples():
    assert np.array_equal(nk.propagate_covariance(np.eye(3), np.diag([1.0, 2, 3])), np.diag([1.0, 2, 3]))
    assert nk.propagate_covariance([[2.0]], [[1.0]])[0, 0] == 4
    with pytest.raises(ValueError):
        nk.propagate_covariance(np.ones((2, 3)), np.eye(2))


def test_product_pipeline_vs_mc(rng):
    """Linear covariance of a complex product pipeline vs 1e5 Monte-Carlo samples."""
    mu = np.array([1.0, 0.5, -0.7, 1.2])
    cov = np.diag([1e-4, 2e-4, 1.5e-4, 1e-4])
    reg = nk.InputRegistry()
    z = reg.complex(reg.register_input("z", mu, cov))
    y = nk.stack([z[0] * z[1], z[0] / z[1]])
    lin = nk.covariance(y, reg)
    r = rng.multivariate_normal(mu, cov, size=100_000)
    c = r[:, 0::2] + 1j * r[:, 1::2]
    out = np.stack([c[:, 0] * c[:, 1], c[:, 0] / c[:, 1]], axis=1)
    samp = np.cov(np.stack([out.real[:, 0], out.imag[:, 0], out.real[:, 1], out.imag[:, 1]]))
    d = np.sqrt(np.diag(lin))
    assert np.max(np.abs(lin - samp) / np.outer(d, d)) < 0.03
    assert np.max(np.abs(np.diag(lin) - np.diag(samp)) / np.diag(lin)) < 0.03


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 7))
def test_propagated_covariance_psd(seed, m):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(m, 5))
    A = rng.normal(size=(5, 5))
    S = nk.propagate_covariance(J, A @ A.T)
    assert np.array_equal(S, S.T)
    assert np.linalg.eigvalsh(S).min() >= -1e-12 * np.trace(S)


# -- Takagi ---------------------------------------------------------------------
def test_takagi_exact_rank2_model():
    g, l = 20 + 2000j, np.array([0, 1e-3, 3e-3])
    y, z = np.exp(g * l), np.exp(-g * l)
    T = np.outer(z, y) + np.outer(y, z)
    tf = nk.takagi_rank2(T)
    assert np.max(np.abs(tf.G @ tf.G.T - T)) <= 1e-10 * tf.s1
    assert tf.s3 <= 1e-12 * tf.s1


def test_takagi_diagonal():
    tf = nk.takagi_rank2(np.diag([2.0, 1.0]))
    G = np.abs(tf.G)
    assert np.allclose(np.sort(G.max(axis=0)), [1, np.sqrt(2)], atol=1e-12)
    assert np.allclose(tf.G @ tf.G.T, np.diag([2, 1]), atol=1e-12)


def test_takagi_degenerate_raises():
    # all lines equal: rank one
    y = np.exp((20 + 2000j) * np.full(3, 1e-3))
    with pytest.raises(nk.DegenerateLineSet):
        nk.takagi_rank2(np.outer(y, y))


def test_takagi_equal_singular_values():
    # s1 == s2: the projected 2x2 route must still reconstruct
    T = np.diag([1.0, 1.0, 0.2]) + 0j
    U = np.linalg.qr(np.random.default_rng(3).normal(size=(3, 3)))[0]
    T = U @ T @ U.T
    tf = nk.takagi_rank2(T)
    w = np.linalg.svd(T)
    trunc = w[0][:, :2] @ np.diag(w[1][:2]) @ w[2][:2]
    assert np.max(np.abs(tf.G @ tf.G.T - trunc)) < 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_takagi_properties(seed, N):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(N, 2)) + 1j * rng.normal(size=(N, 2))
    T = A @ A.T
    if N > 2:
        E = rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N))
        T = T + 1e-3 * (E + E.T)
    tf = nk.takagi_rank2(T)
    U, s, Vh = np.linalg.svd(T)
    trunc = U[:, :2] @ np.diag(s[:2]) @ Vh[:2]
    assert np.max(np.abs(tf.G @ tf.G.T - trunc)) <= 1e-10 * s[0]
    Ut = tf.G / np.sqrt(tf.s)
    assert np.max(np.abs(Ut.conj().T @ Ut - np.eye(2))) < 1e-10
    J = np.array([[0, 1j], [-1j, 0]])
    WH = tf.G @ J @ tf.G.T
    assert np.array_equal(WH, -WH.T) or np.max(np.abs(WH + WH.T)) <= 1e-14 * np.abs(WH).max()


# -- eigen-extraction -------------------------------------------------------------
def test_eig_pm_diagonal():
    lam, x1, x4 = nk.eig_pm_lambda(np.diag([-5.0, 0, 0, 5.0]))
    assert lam.value == pytest.approx(5)
    assert np.count_nonzero(np.abs(x1.value) > 1e-12) == 1 and abs(x1.value[0]) > 0
    assert np.count_nonzero(np.abs(x4.value) > 1e-12) == 1 and abs(x4.value[3]) > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_eig_pm_constructive(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    lam0 = 2 + 1j
    F = X @ np.diag([-lam0, 0, 0, lam0]) @ np.linalg.inv(X)
    if np.linalg.cond(X) > 1e4:
        return
    lam, x1, x4 = nk.eig_pm_lambda(F)
    assert abs(lam.value - lam0) < 1e-10 * abs(lam0) * np.linalg.cond(X)
    fn = np.linalg.norm(F)
    for x, mu in ((x1.value, -lam0), (x4.value, lam0)):
        assert np.linalg.norm(F @ x - mu * x) <= 1e-8 * fn * np.linalg.norm(x)
    c1 = np.abs(np.vdot(x1.value, X[:, 0])) / (np.linalg.norm(x1.value) * np.linalg.norm(X[:, 0]))
    c4 = np.abs(np.vdot(x4.value, X[:, 3])) / (np.linalg.norm(x4.value) * np.linalg.norm(X[:, 3]))
    assert c1 > 1 - 1e-10 and c4 > 1 - 1e-10
    # spectral projectors have rank one
    Pp = F @ (F + lam0 * np.eye(4))
    s = np.linalg.svd(Pp, compute_uv=False)
    assert s[1] <= 1e-8 * s[0]


def test_eig_pm_rejects_bad_spectrum():
    with pytest.raises(ValueError):
        nk.eig_pm_lambda(np.diag([1.0, 1, 1, 1]))
    with pytest.raises(ValueError):
        nk.eig_pm_lambda(np.zeros((4, 4)))


def test_eig_pm_grad_vs_fd(rng):
    X = np.eye(4) + 0.3 * (rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4)))
    F0 = X @ np.diag([-2 - 1j, 0, 0, 2 + 1j]) @ np.linalg.inv(X)
    r0 = nk.real_split(F0)

    def f(r):
        lam, x1, x4 = nk.eig_pm_lambda(cplx(r, (4, 4)))
        return np.concatenate([[lam.value], x1.value, x4.value])

    J = engine_jac(lambda F: nk.stack([nk.eig_pm_lambda(F)[0]]), r0, (4, 4))
    Jfd = fd_jacobian(lambda r: f(r)[:1], r0)
    assert np.max(np.abs(J - Jfd)) / np.max(np.abs(J)) < 1e-6


def test_inverse_singular_error_carries_index():
    with pytest.raises(nk.SingularMatrixError) as e:
        nk.inv(np.zeros((2, 2)), index=7)
    assert e.value.index == 7


def test_dominant_projector_grad(rng):
    A = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    H0 = A @ A.conj().T
    r0 = nk.real_split(H0)

    def build(H):
        return nk.dominant_projector((H + H.H) * 0.5, 2)[0]

    def ref(r):
        H = cplx(r, (4, 4))
        H = (H + H.conj().T) / 2
        w, U = np.linalg.eigh(H)
        Uk = U[:, np.argsort(w)[::-1][:2]]
        return Uk @ Uk.conj().T

    J = engine_jac(build, r0, (4, 4))
    Jfd = fd_jacobian(ref, r0)
    assert np.max(np.abs(J - Jfd)) / np.max(np.abs(J)) < 1e-6
