"""Complex linear algebra over plain and uncertain values.

An :class:`UncArray` carries a complex value array together with its first
derivatives with respect to every component of a real input vector ``r``
held by an :class:`InputRegistry`. The derivative of a complex quantity ``z``
with respect to a real input ``r_k`` is stored as the complex number
``dRe(z)/dr_k + 1j*dIm(z)/dr_k``; splitting it into real and imaginary parts
gives the real-valued Jacobian rows in the interleaved ``[Re, Im]`` ordering.

Gradients are dense with the input axis first: ``grad.shape == (n,) + value.shape``.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "InputRegistry", "UncArray", "TakagiFactors", "DegenerateLineSet", "SingularMatrixError",
    "const", "asunc", "exp", "log", "sqrt", "absolute", "conj", "real", "imag", "inv", "det",
    "kron", "vec", "unvec", "stack", "matmul", "diag", "trace", "dot",
    "propagate_covariance", "covariance", "jacobian", "real_split", "takagi_rank2",
    "eig_pm_lambda", "dominant_projector", "check_psd",
]


class SingularMatrixError(ValueError):
    """Matrix inverse requested for a (numerically) singular matrix."""

    def __init__(self, message, cond=None, index=None):
        super().__init__(message)
        self.cond = cond
        self.index = index


class DegenerateLineSet(ValueError):
    """The line-pair structure has rank below two (no usable line pair)."""


def check_psd(cov, label="covariance", rtol=1e-12):
    """Return the symmetrized ``cov`` or raise if it is not positive semidefinite."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{label}: covariance must be square, got {cov.shape}")
    sym = (cov + cov.T) / 2
    if not np.all(np.isfinite(sym)):
        raise ValueError(f"{label}: covariance has non-finite entries")
    scale = max(np.abs(np.diag(sym)).sum(), np.finfo(float).tiny)
    if np.abs(cov - cov.T).max(initial=0) > 1e-8 * scale:
        raise ValueError(f"{label}: covariance is not symmetric")
    if sym.size:
        emin = np.linalg.eigvalsh(sym).min()
        if emin < -rtol * scale * 1e3 and emin < -1e-300:
            # the 1e3 factor absorbs eigensolver round-off on near-singular blocks
            raise ValueError(f"{label}: covariance is not PSD (min eigenvalue {emin:.3e}, trace {scale:.3e})")
    return sym


@dataclass
class _Entry:
    source_id: int
    label: str
    mean: np.ndarray
    cov: np.ndarray
    offset: int
    kind: str = None
    standard: str = None

    @property
    def size(self):
        return self.mean.size


class InputRegistry:
    """Append-only registry of real input blocks with their means and covariances.

    Register every input first, then create uncertain variables with
    :meth:`real` or :meth:`complex`; the first such call freezes the registry
    because gradient rows are sized by the total dimension.
    """

    def __init__(self):
        self.entries = []
        self._frozen = False
        self._dim = 0

    def register_input(self, label, mean, cov, *, kind=None, standard=None):
        if self._frozen:
            raise RuntimeError("registry is frozen; register inputs before creating variables")
        mean = np.atleast_1d(np.asarray(mean, dtype=float)).ravel()
        if mean.size == 0:
            raise ValueError(f"{label}: cannot register a zero-dimensional input")
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = np.eye(mean.size) * float(cov)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"{label}: covariance shape {cov.shape} does not match mean of size {mean.size}")
        cov = check_psd(cov, label)
        sid = len(self.entries)
        self.entries.append(_Entry(sid, label, mean, cov, self._dim, kind, standard))
        self._dim += mean.size
        return sid

    @property
    def dim(self):
        return self._dim

    def freeze(self):
        self._frozen = True
        return self

    def slice(self, sid):
        e = self.entries[sid]
        return slice(e.offset, e.offset + e.size)

    def real(self, sid):
        """Real uncertain vector for block ``sid`` (unit gradient rows)."""
        self.freeze()
        e = self.entries[sid]
        grad = np.zeros((self._dim, e.size), dtype=complex)
        grad[e.offset:e.offset + e.size, :] = np.eye(e.size)
        return UncArray(e.mean.astype(complex), grad)

    def complex(self, sid, shape=None):
        """Complex uncertain array from a real-split block ``[Re z1, Im z1, Re z2, ...]``.

        Components are in column-stacked (Fortran) order, so an 8-dim block
        with ``shape=(2, 2)`` yields ``[[z1, z3], [z2, z4]]``.
        """
        self.freeze()
        e = self.entries[sid]
        if e.size % 2:
            raise ValueError(f"{e.label}: real-split block must have even size")
        m = e.size // 2
        grad = np.zeros((self._dim, m), dtype=complex)
        idx = np.arange(m)
        grad[e.offset + 2 * idx, idx] = 1.0
        grad[e.offset + 2 * idx + 1, idx] = 1j
        u = UncArray(e.mean[0::2] + 1j * e.mean[1::2], grad)
        if shape is not None:
            u = unvec(u, shape)
        return u

    def covariance(self):
        cov = np.zeros((self._dim, self._dim))
        for e in self.entries:
            s = slice(e.offset, e.offset + e.size)
            cov[s, s] = e.cov
        return cov

    def groups(self, key):
        """Map group name -> index array of input components, grouping by ``kind`` or ``standard``."""
        out = {}
        for e in self.entries:
            name = getattr(e, key)
            if name is None:
                name = "other"
            out.setdefault(name, []).extend(range(e.offset, e.offset + e.size))
        return {k: np.asarray(v, dtype=int) for k, v in out.items()}


def _bgrad(x, ndim):
    """Gradient of ``x`` padded so it broadcasts against a result of ``ndim`` dims."""
    pad = ndim - x.ndim
    if pad <= 0:
        return x.grad
    return x.grad.reshape((x.n,) + (1,) * pad + x.shape)


class UncArray:
    """Complex array with first-order sensitivities to the registry inputs."""

    __slots__ = ("value", "grad")
    __array_ufunc__ = None  # make numpy defer binary operators to us

    def __init__(self, value, grad):
        self.value = np.asarray(value, dtype=complex)
        self.grad = np.asarray(grad, dtype=complex)
        if self.grad.shape[1:] != self.value.shape:
            raise ValueError(f"gradient shape {self.grad.shape} does not match value shape {self.value.shape}")

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def n(self):
        return self.grad.shape[0]

    @property
    def size(self):
        return self.value.size

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"UncArray(value={self.value!r}, n={self.n})"

    @property
    def T(self):
        if self.ndim < 2:
            return self
        return UncArray(self.value.T, np.swapaxes(self.grad, -1, -2))

    def conj(self):
        return UncArray(np.conj(self.value), np.conj(self.grad))

    @property
    def H(self):
        return self.conj().T

    @property
    def real(self):
        return UncArray(self.value.real, self.grad.real)

    @property
    def imag(self):
        return UncArray(self.value.imag, self.grad.imag)

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return UncArray(self.value[idx], self.grad[(slice(None),) + idx])

    def reshape(self, shape, order="C"):
        # the gradient axis leads in both C and F order, so one reshape suffices
        shape = tuple(np.atleast_1d(shape))
        return UncArray(np.reshape(self.value, shape, order=order),
                        np.reshape(self.grad, (self.n,) + shape, order=order))

    def sum(self, axis=None):
        if axis is None:
            return UncArray(self.value.sum(), self.grad.reshape(self.n, -1).sum(axis=1))
        axis = axis % self.ndim
        return UncArray(self.value.sum(axis=axis), self.grad.sum(axis=axis + 1))

    # -- arithmetic -----------------------------------------------------------
    def _binary(self, other):
        other = asunc(other, self.n)
        if other.n != self.n:
            if other.n == 0:
                other = const(other.value, self.n)
            elif self.n == 0:
                return const(self.value, other.n), other
            else:
                raise ValueError(f"gradient length mismatch: {self.n} vs {other.n}")
        return self, other

    def __neg__(self):
        return UncArray(-self.value, -self.grad)

    def __pos__(self):
        return self

    def __add__(self, other):
        a, b = self._binary(other)
        v = a.value + b.value
        return UncArray(v, _bgrad(a, v.ndim) + _bgrad(b, v.ndim))

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self._binary(other)
        v = a.value - b.value
        return UncArray(v, _bgrad(a, v.ndim) - _bgrad(b, v.ndim))

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        a, b = self._binary(other)
        v = a.value * b.value
        return UncArray(v, _bgrad(a, v.ndim) * b.value + a.value * _bgrad(b, v.ndim))

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self._binary(other)
        if np.any(b.value == 0):
            raise ZeroDivisionError("division by an uncertain value equal to zero")
        q = a.value / b.value
        return UncArray(q, (_bgrad(a, q.ndim) - q * _bgrad(b, q.ndim)) / b.value)

    def __rtruediv__(self, other):
        return asunc(other, self.n).__truediv__(self)

    def __pow__(self, p):
        if isinstance(p, (int, np.integer)) and p >= 0:
            if p == 0:
                return const(np.ones_like(self.value), self.n)
            out = self
            for _ in range(p - 1):
                out = out * self
            return out
        p = complex(p)
        v = self.value ** p
        return UncArray(v, p * self.value ** (p - 1) * self.grad)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def const(value, n=0):
    """Wrap a plain array as an UncArray with zero sensitivity."""
    value = np.asarray(value, dtype=complex)
    return UncArray(value, np.zeros((n,) + value.shape, dtype=complex))


def asunc(x, n=0):
    if isinstance(x, UncArray):
        return x
    return const(x, n)


def value_of(x):
    return x.value if isinstance(x, UncArray) else np.asarray(x, dtype=complex)


def _common(*xs):
    n = max((x.n for x in xs if isinstance(x, UncArray)), default=0)
    out = []
    for x in xs:
        x = asunc(x, n)
        if x.n != n:
            if x.n == 0:
                x = const(x.value, n)
            else:
                raise ValueError("gradient length mismatch")
        out.append(x)
    return out


# -- elementwise functions ----------------------------------------------------
def exp(x):
    x = asunc(x)
    v = np.exp(x.value)
    return UncArray(v, v * x.grad)


def log(x):
    """Principal-branch logarithm; callers unwrap phase themselves."""
    x = asunc(x)
    if np.any(x.value == 0):
        raise ValueError("log of zero")
    return UncArray(np.log(x.value), x.grad / x.value)


def sqrt(x):
    """Principal-branch square root."""
    x = asunc(x)
    v = np.sqrt(x.value)
    if np.any(v == 0) and x.n:
        raise ValueError("sqrt is not differentiable at zero")
    return UncArray(v, x.grad / (2 * v) if x.n else x.grad)


def absolute(x):
    """Magnitude |z| (real-valued result)."""
    x = asunc(x)
    m = np.abs(x.value)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(m > 0, (np.conj(x.value) * x.grad).real / np.where(m > 0, m, 1), 0.0)
    return UncArray(m.astype(complex), g.astype(complex))


def conj(x):
    return asunc(x).conj()


def real(x):
    return asunc(x).real


def imag(x):
    return asunc(x).imag


# -- linear algebra -------------------------------------------------------------
def matmul(a, b):
    a, b = _common(a, b)
    v = a.value @ b.value
    sa = "ij" if a.ndim == 2 else "j"
    sb = "jk" if b.ndim == 2 else "j"
    so = (sa[0] if a.ndim == 2 else "") + (sb[1] if b.ndim == 2 else "")
    g = np.einsum(f"{sa},n{sb}->n{so}", a.value, b.grad) + np.einsum(f"n{sa},{sb}->n{so}", a.grad, b.value)
    return UncArray(v, g)


dot = matmul


def inv(a, index=None):
    """Matrix inverse with gradient ``-A^-1 dA A^-1``."""
    a = asunc(a)
    d = np.linalg.det(a.value)
    if not np.isfinite(d) or abs(d) <= 1e-300:
        raise SingularMatrixError("singular matrix in inverse", cond=np.inf, index=index)
    cond = np.linalg.cond(a.value)
    if cond > 1e14:
        raise SingularMatrixError(f"ill-conditioned matrix in inverse (cond={cond:.2e})", cond=cond, index=index)
    ai = np.linalg.inv(a.value)
    g = -np.einsum("ij,njk,kl->nil", ai, a.grad, ai)
    return UncArray(ai, g)


def det(a):
    a = asunc(a)
    d = np.linalg.det(a.value)
    if a.shape == (2, 2):
        v = a.value
        g = (a.grad[:, 0, 0] * v[1, 1] + v[0, 0] * a.grad[:, 1, 1]
             - a.grad[:, 0, 1] * v[1, 0] - v[0, 1] * a.grad[:, 1, 0])
        return UncArray(d, g)
    # adjugate form stays valid for singular matrices
    adj = _adjugate(a.value)
    g = np.einsum("ji,nij->n", adj, a.grad)
    return UncArray(d, g)


def _adjugate(m):
    n = m.shape[0]
    adj = np.empty_like(m)
    for i in range(n):
        for j in range(n):
            minor = np.delete(np.delete(m, i, axis=0), j, axis=1)
            adj[j, i] = (-1) ** (i + j) * np.linalg.det(minor)
    return adj


def trace(a):
    a = asunc(a)
    return UncArray(np.trace(a.value), np.trace(a.grad, axis1=1, axis2=2))


def diag(x):
    """Diagonal matrix from a vector (or the diagonal of a matrix)."""
    x = asunc(x)
    if x.ndim == 1:
        m = x.size
        g = np.zeros((x.n, m, m), dtype=complex)
        idx = np.arange(m)
        g[:, idx, idx] = x.grad
        return UncArray(np.diag(x.value), g)
    return UncArray(np.diag(x.value), np.diagonal(x.grad, axis1=1, axis2=2))


def kron(a, b):
    a, b = _common(a, b)
    v = np.kron(a.value, b.value)
    g = np.stack([np.kron(ga, b.value) + np.kron(a.value, gb) for ga, gb in zip(a.grad, b.grad)]) \
        if a.n else np.zeros((0,) + v.shape, dtype=complex)
    return UncArray(v, g)


def vec(a):
    """Column-stacking vectorization."""
    a = asunc(a)
    if a.ndim != 2:
        raise ValueError("vec expects a matrix")
    return a.reshape(a.size, order="F")


def unvec(a, shape):
    return asunc(a).reshape(shape, order="F")


def stack(xs, axis=0):
    xs = _common(*xs)
    v = np.stack([x.value for x in xs], axis=axis)
    g = np.stack([x.grad for x in xs], axis=axis + 1 if axis >= 0 else axis)
    return UncArray(v, g)


# -- covariance ------------------------------------------------------------------
def real_split(z):
    """Interleaved ``[Re z1, Im z1, ...]`` of a column-stacked vector (plain arrays)."""
    z = np.asarray(z, dtype=complex).ravel(order="F")
    out = np.empty(2 * z.size)
    out[0::2] = z.real
    out[1::2] = z.imag
    return out


def jacobian(x, real_valued=False):
    """Real Jacobian of ``x`` with respect to the registry inputs.

    Complex outputs yield rows in interleaved ``[Re, Im]`` order over the
    column-stacked components; ``real_valued`` keeps only the real parts.
    """
    x = asunc(x)
    g = np.reshape(x.grad, (x.n, -1), order="F")
    if real_valued:
        return g.real.T.copy()
    out = np.empty((2 * g.shape[1], x.n))
    out[0::2] = g.real.T
    out[1::2] = g.imag.T
    return out


def propagate_covariance(J, cov):
    """Linear propagation ``J @ cov @ J.T`` (symmetrized)."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1] or J.shape[1] != cov.shape[0]:
        raise ValueError(f"dimension mismatch: J {J.shape}, covariance {cov.shape}")
    out = J @ cov @ J.T
    return (out + out.T) / 2


def covariance(x, registry, real_valued=False):
    return propagate_covariance(jacobian(x, real_valued), registry.covariance())


# -- Takagi factorization -----------------------------------------------------------
@dataclass
class TakagiFactors:
    G: np.ndarray
    s: np.ndarray = field(default_factory=lambda: np.zeros(2))
    s3: float = 0.0

    @property
    def s1(self):
        return self.s[0]

    @property
    def s2(self):
        return self.s[1]


def _takagi_2x2(C):
    """Takagi vectors of a 2x2 complex symmetric matrix through its real symmetric embedding."""
    A, B = C.real, C.imag
    E = np.block([[A, B], [B, -A]])
    w, V = np.linalg.eigh((E + E.T) / 2)
    order = np.argsort(w)[::-1][:2]
    u = V[:2, order] - 1j * V[2:, order]
    return u, w[order]


def takagi_rank2(T, gap_rtol=1e-8, degenerate_rtol=1e-10):
    """Rank-2 Takagi factor ``G`` (N x 2) with ``G @ G.T`` the best rank-2 approximation of ``T``.

    Uses the SVD with a per-vector phase fix; when the two dominant singular
    values nearly coincide the problem is projected onto their subspace and the
    2x2 factorization is solved directly.
    """
    T = np.asarray(T, dtype=complex)
    N = T.shape[0]
    if T.ndim != 2 or T.shape[1] != N or N < 2:
        raise ValueError("takagi_rank2 expects a square matrix of size >= 2")
    nrm = np.linalg.norm(T)
    if np.linalg.norm(T - T.T) > 1e-8 * max(nrm, 1e-300):
        T = (T + T.T) / 2
    U, s, Vh = np.linalg.svd(T)
    s3 = float(s[2]) if N > 2 else 0.0
    if s[0] == 0 or s[1] <= degenerate_rtol * s[0]:
        raise DegenerateLineSet("degenerate line set: rank-2 structure missing")
    if s[0] - s[1] > gap_rtol * s[0]:
        theta = np.angle(np.einsum("ij,ji->i", U[:, :2].conj().T, Vh[:2, :].T))
        Ut = U[:, :2] * np.exp(0.5j * theta)
        sv = s[:2]
    else:
        U2 = U[:, :2]
        C = U2.conj().T @ T @ U2.conj()
        C = (C + C.T) / 2
        uc, sv = _takagi_2x2(C)
        Ut = U2 @ uc
    return TakagiFactors(Ut * np.sqrt(sv), np.asarray(sv, float), s3)


def dominant_projector(H, rank=2):
    """Orthogonal projector onto the ``rank`` dominant eigenvectors of a Hermitian matrix.

    Returns ``(P, U)`` where ``U`` holds the dominant eigenvectors as plain
    values. The derivative uses first-order eigenspace perturbation and only
    requires a gap between kept and discarded eigenvalues.
    """
    H = asunc(H)
    Hv = (H.value + H.value.conj().T) / 2
    w, U = np.linalg.eigh(Hv)
    order = np.argsort(w)[::-1]
    w, U = w[order], U[:, order]
    N = len(w)
    Uk = U[:, :rank]
    P = Uk @ Uk.conj().T
    if rank < N and w[rank - 1] - w[rank] <= 1e-12 * max(abs(w[0]), 1e-300):
        raise DegenerateLineSet("no spectral gap below the dominant subspace")
    kept = np.arange(N) < rank
    phi = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            if kept[i] and not kept[j]:
                phi[i, j] = 1.0 / (w[i] - w[j])
            elif kept[j] and not kept[i]:
                phi[i, j] = 1.0 / (w[j] - w[i])
    if H.n:
        Gk = np.einsum("ai,nab,bj->nij", U.conj(), H.grad, U)
        g = np.einsum("ai,nij,bj->nab", U, phi * Gk, U.conj())
    else:
        g = np.zeros((0, N, N), dtype=complex)
    return UncArray(P, g), Uk


# -- eigen-extraction for the +-lambda spectrum ----------------------------------------
def _pick_column(m):
    norms = np.linalg.norm(m, axis=0)
    return int(np.argmax(norms))  # argmax returns the lowest index on ties


def eig_pm_lambda(F, trace_rtol=1e-1, lam_rtol=1e-12):
    """Eigenvalue ``lambda`` and eigenvectors ``x1`` (for ``-lambda``) and ``x4`` (for ``+lambda``).

    ``F`` is 4x4 with spectrum ``{mu_minus, 0, 0, mu_plus}`` where
    ``mu_plus ~ -mu_minus``. The two non-zero eigenvalues follow from
    ``trace(F)`` and ``trace(F @ F)``; eigenvectors are columns of the spectral
    projectors ``F (F - mu I)``, which are smooth in ``F``. Returns
    ``(lam, x1, x4)`` with ``lam = (mu_plus - mu_minus) / 2``; vectors unnormalized.
    """
    F = asunc(F)
    Fv = F.value
    fn = np.linalg.norm(Fv)
    tr = trace(F)
    if abs(tr.value) > trace_rtol * max(fn, 1e-300):
        raise ValueError(f"F does not have a +-lambda spectrum (|trace|/|F| = {abs(tr.value) / fn:.2e})")
    F2 = F @ F
    disc = sqrt(2 * trace(F2) - tr * tr)
    lam = disc / 2
    if abs(lam.value) <= lam_rtol * max(fn, 1e-300):
        raise ValueError("lambda vanishes: no usable line pair at this frequency")
    mu_p = tr / 2 + lam
    mu_m = tr / 2 - lam
    P_plus = F2 - F * mu_m        # F (F - mu_m I); columns in the +lambda eigenspace
    P_minus = F2 - F * mu_p
    c4 = _pick_column(P_plus.value)
    c1 = _pick_column(P_minus.value)
    return lam, P_minus[:, c1], P_plus[:, c4]
