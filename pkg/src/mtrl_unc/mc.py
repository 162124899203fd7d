"""Monte-Carlo harness on synthetic CPW standards embedded in fixed error boxes.

Random streams: a ``numpy.random.SeedSequence(seed)`` is spawned into one child
per trial, and each trial child into four grandchildren in the fixed order
(cpw, lengths, reflect, noise). Every stream drives a PCG64 generator and
Gaussian variates come from ``Generator.standard_normal`` (ziggurat), so a
given seed reproduces the trial stream bit for bit and trials are independent
of how many others are run.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cpw
from . import gum
from . import kernels as K
from . import mtrl
from . import network as nw

DEFAULT_LENGTHS = (200e-6, 450e-6, 900e-6, 1800e-6, 3500e-6, 5250e-6)
DEFAULT_DUT = np.array([[1, 1j], [1j, 1]]) / np.sqrt(2)
QUANTITIES = ("ereff", "loss_db_per_m", "|S11|", "|S21|")


def default_frequencies():
    return np.arange(5e9, 150e9 + 1, 5e9)


def error_box_s(f, port):
    """Smooth, frequency-dependent synthetic error-box S-parameters (port 1 or 2)."""
    f = np.asarray(f, dtype=float)
    x = f / 100e9
    if port == 1:
        s11 = 0.12 * np.exp(-1j * (2.1 * x + 0.3))
        s21 = 0.85 * (1 - 0.10 * x) * np.exp(-1j * (6.0 * x + 0.2))
        s12 = 0.80 * (1 - 0.08 * x) * np.exp(-1j * (6.0 * x + 0.5))
        s22 = 0.18 * np.exp(-1j * (3.7 * x - 0.4))
    else:
        s11 = 0.15 * np.exp(-1j * (4.3 * x + 1.1))
        s21 = 0.78 * (1 - 0.12 * x) * np.exp(-1j * (5.2 * x - 0.3))
        s12 = 0.83 * (1 - 0.09 * x) * np.exp(-1j * (5.2 * x + 0.1))
        s22 = 0.10 * np.exp(-1j * (2.9 * x + 0.7))
    S = np.empty(f.shape + (2, 2), dtype=complex)
    S[..., 0, 0], S[..., 0, 1], S[..., 1, 0], S[..., 1, 1] = s11, s12, s21, s22
    return S


def default_error_boxes(f):
    """(A, B, k) normalized error boxes and 7th term per frequency."""
    TA = nw.s_to_t(error_box_s(f, 1))
    TB = nw.s_to_t(error_box_s(f, 2))
    ka = TA[..., 1, 1]
    kb = TB[..., 1, 1]
    return TA / ka[..., None, None], TB / kb[..., None, None], ka * kb


def embed(A, B, k, T):
    return k[..., None, None] * (A @ T @ B)


def reflect_raw(A, B, ga, gb):
    """Raw reflections of a one-port reflect at each port seen through A and B."""
    r1 = (A[..., 0, 0] * ga + A[..., 0, 1]) / (A[..., 1, 0] * ga + 1)
    r2 = (B[..., 0, 0] * gb - B[..., 1, 0]) / (1 - B[..., 0, 1] * gb)
    return r1, r2


def line_t(G, gamma, length):
    """Vectorized mismatched line T-matrices (broadcast over inputs)."""
    G, gamma, length = np.broadcast_arrays(np.asarray(G, complex), np.asarray(gamma, complex),
                                           np.asarray(length, float))
    e = np.exp(-gamma * length)
    ei = 1 / e
    s = 1 / (1 - G * G)
    T = np.empty(G.shape + (2, 2), dtype=complex)
    T[..., 0, 0] = (e - G * G * ei) * s
    T[..., 0, 1] = (G * ei - G * e) * s
    T[..., 1, 0] = (G * e - G * ei) * s
    T[..., 1, 1] = (ei - G * G * e) * s
    return T


@dataclass
class McScenario:
    frequencies: np.ndarray = field(default_factory=default_frequencies)
    lengths: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_LENGTHS))
    thru: int = 0
    geometry: cpw.CpwGeometry = field(default_factory=lambda: cpw.TABLE_I)
    mismatch: bool = True
    length_std: float = 40e-6
    reflect_offset_std: float = 40e-6
    reflect_gamma: complex = 1.0 + 0j
    reflect_estimate: complex = 1.0 + 0j
    noise_std: float = 1e-3
    noise_cov: dict = None
    dut: np.ndarray = field(default_factory=lambda: DEFAULT_DUT.copy())
    trials: int = 1000
    seed: int = 0
    ereff_guess: float = 5.0

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float).ravel()
        self.lengths = np.asarray(self.lengths, dtype=float).ravel()
        self.dut = np.asarray(self.dut, dtype=complex).reshape(2, 2)
        self.reflect_gamma = complex(self.reflect_gamma)
        self.reflect_estimate = complex(self.reflect_estimate)
        if self.trials < 2:
            raise ValueError("trial count must be at least 2")
        if self.noise_std < 0 or self.length_std < 0 or self.reflect_offset_std < 0:
            raise ValueError("standard deviations must be non-negative")
        if isinstance(self.geometry, dict):
            self.geometry = cpw.CpwGeometry.from_dict(self.geometry)

    @property
    def lineset(self):
        return mtrl.LineSet(self.lengths, self.thru, self.reflect_estimate, self.ereff_guess)

    @property
    def names(self):
        return gum.standard_names(len(self.lengths), self.thru)

    def noise_blocks(self):
        """standard name -> (F, 8, 8) S-parameter noise covariance."""
        F = len(self.frequencies)
        out = {}
        for nm in self.names + ["reflect", "dut"]:
            if self.noise_cov and nm in self.noise_cov:
                out[nm] = np.asarray(self.noise_cov[nm], dtype=float).reshape(F, 8, 8)
            else:
                out[nm] = np.broadcast_to(self.noise_std ** 2 * np.eye(8), (F, 8, 8)).copy()
        return out

    def scaled(self, c):
        """Scenario with every perturbation standard deviation multiplied by ``c``."""
        d = dict(self.__dict__)
        d["length_std"] *= c
        d["reflect_offset_std"] *= c
        d["noise_std"] *= c
        d["geometry"] = self.geometry.scaled_uncertainties(c)
        if self.noise_cov:
            d["noise_cov"] = {k: np.asarray(v) * c * c for k, v in self.noise_cov.items()}
        return McScenario(**d)

    # -- JSON ------------------------------------------------------------------
    def to_dict(self):
        return {
            "frequencies_hz": self.frequencies.tolist(), "lengths_m": self.lengths.tolist(),
            "thru": self.thru, "geometry": asdict(self.geometry), "mismatch": self.mismatch,
            "length_std": self.length_std, "reflect_offset_std": self.reflect_offset_std,
            "reflect_gamma": [self.reflect_gamma.real, self.reflect_gamma.imag],
            "reflect_estimate": [self.reflect_estimate.real, self.reflect_estimate.imag],
            "noise_std": self.noise_std,
            "dut_s": [[[z.real, z.imag] for z in row] for row in self.dut],
            "trials": self.trials, "seed": self.seed, "ereff_guess": self.ereff_guess,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kw = {}
        if "frequencies_hz" in d:
            kw["frequencies"] = d.pop("frequencies_hz")
        elif "frequency_grid" in d:
            g = d.pop("frequency_grid")
            kw["frequencies"] = np.linspace(g["start_hz"], g["stop_hz"], int(g["points"]))
        if "lengths_m" in d:
            kw["lengths"] = d.pop("lengths_m")
        for key in ("reflect_gamma", "reflect_estimate"):
            if key in d:
                v = d.pop(key)
                kw[key] = complex(v[0], v[1]) if isinstance(v, (list, tuple)) else complex(v)
        if "dut_s" in d:
            a = np.asarray(d.pop("dut_s"), dtype=float)
            kw["dut"] = a[..., 0] + 1j * a[..., 1]
        if "geometry" in d:
            kw["geometry"] = cpw.CpwGeometry.from_dict(d.pop("geometry"))
        for key in ("thru", "trials", "seed"):
            if key in d:
                kw[key] = int(d.pop(key))
        for key in ("mismatch",):
            if key in d:
                kw[key] = bool(d.pop(key))
        for key in ("length_std", "reflect_offset_std", "noise_std", "ereff_guess"):
            if key in d:
                kw[key] = float(d.pop(key))
        if "noise_cov" in d:
            kw["noise_cov"] = d.pop("noise_cov")
        if d:
            raise ValueError(f"unknown scenario fields: {sorted(d)}")
        return cls(**kw)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


@dataclass
class SyntheticDataset:
    frequencies: np.ndarray
    lines: list
    reflect: nw.TwoPortRecord
    dut: nw.TwoPortRecord
    lineset: mtrl.LineSet
    gamma: np.ndarray
    z0: np.ndarray
    boxes: tuple


def synthesize_dataset(sc, boxes=None):
    """Nominal raw standards and DUT: M_i = k A L_i B with CPW propagation constant."""
    f = sc.frequencies
    A, B, k = default_error_boxes(f) if boxes is None else boxes
    gamma, z0, _, _ = cpw.cpw_model(sc.geometry, f)
    dl = sc.lengths - sc.lengths[sc.thru]
    lines = []
    for d in dl:
        L = line_t(0.0, gamma, d)
        lines.append(nw.TwoPortRecord(f, nw.t_to_s(embed(A, B, k, L))))
    r1, r2 = reflect_raw(A, B, sc.reflect_gamma, sc.reflect_gamma)
    Sr = np.zeros((len(f), 2, 2), dtype=complex)
    Sr[:, 0, 0], Sr[:, 1, 1] = r1, r2
    dut = nw.TwoPortRecord(f, nw.t_to_s(embed(A, B, k, nw.s_to_t(np.broadcast_to(sc.dut, (len(f), 2, 2))))))
    return SyntheticDataset(f, lines, nw.TwoPortRecord(f, Sr), dut, sc.lineset, gamma, z0, (A, B, k))


def _sqrtm_psd(C):
    w, V = np.linalg.eigh((C + np.swapaxes(C, -1, -2)) / 2)
    return V * np.sqrt(np.clip(w, 0, None))[..., None, :]


def trial_streams(seed, trials):
    """Per-trial, per-source generators (cpw, lengths, reflect, noise)."""
    root = np.random.SeedSequence(seed)
    for child in root.spawn(trials):
        yield [np.random.Generator(np.random.PCG64(s)) for s in child.spawn(4)]


def _vec_ri_to_s(v):
    c = v[..., 0::2] + 1j * v[..., 1::2]
    S = np.empty(v.shape[:-1] + (2, 2), dtype=complex)
    S[..., 0, 0], S[..., 1, 0], S[..., 0, 1], S[..., 1, 1] = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    return S


def draw_trial(sc, ds, streams, noise_sqrt):
    """One perturbed raw dataset: (line T (F, N, 2, 2), ga, gb, dut T (F, 2, 2))."""
    g_cpw, g_len, g_refl, g_noise = streams
    f = sc.frequencies
    F, N = len(f), len(sc.lengths)
    A, B, k = ds.boxes
    geom = sc.geometry
    u = geom.uncertainties()
    z = g_cpw.standard_normal((N, len(u)))
    dlen = g_len.standard_normal(N) * sc.length_std
    doff = g_refl.standard_normal(2) * sc.reflect_offset_std
    l_true = sc.lengths + dlen
    dl_true = l_true - l_true[sc.thru]
    Ts = np.empty((F, N, 2, 2), dtype=complex)
    for j in range(N):
        if sc.mismatch and np.any(u > 0):
            gj, zj, _, _ = cpw.cpw_model(geom.with_values(geom.vector() + u * z[j]), f)
            G = (zj - ds.z0) / (zj + ds.z0)
        else:
            gj, G = ds.gamma, np.zeros(F)
        Ts[:, j] = line_t(G, gj, dl_true[j])
    names = sc.names + ["reflect", "dut"]
    eps = g_noise.standard_normal((len(names), F, 8))
    noise = {nm: _vec_ri_to_s(np.einsum("fij,fj->fi", noise_sqrt[nm], eps[q])) for q, nm in enumerate(names)}
    Ms = np.empty_like(Ts)
    for j, nm in enumerate(sc.names):
        S = nw.t_to_s(embed(A, B, k, Ts[:, j])) + noise[nm]
        Ms[:, j] = nw.s_to_t(S)
    gam = ds.gamma
    ga, gb = reflect_raw(A, B, sc.reflect_gamma * np.exp(-2 * gam * doff[0]),
                         sc.reflect_gamma * np.exp(-2 * gam * doff[1]))
    ga = ga + noise["reflect"][:, 0, 0]
    gb = gb + noise["reflect"][:, 1, 1]
    Sd = ds.dut.s + noise["dut"]
    return Ms, ga, gb, nw.s_to_t(Sd)


@dataclass
class McResult:
    frequencies: np.ndarray
    samples: dict            # quantity -> (trials_kept, F)
    n_trials: int
    n_dropped: int

    @property
    def mean(self):
        return {q: v.mean(axis=0) for q, v in self.samples.items()}

    @property
    def std(self):
        return {q: v.std(axis=0, ddof=1) for q, v in self.samples.items()}

    @property
    def drop_rate(self):
        return self.n_dropped / self.n_trials

    def to_dict(self):
        m, s = self.mean, self.std
        return {"frequencies_hz": self.frequencies.tolist(), "n_trials": self.n_trials,
                "n_dropped": self.n_dropped,
                "quantities": {q: {"mean": m[q].tolist(), "std": s[q].tolist()} for q in self.samples}}


class McFailure(RuntimeError):
    pass


def run_mc(sc, max_drop_rate=0.01, ds=None):
    """Full calibration per trial; returns a :class:`McResult` of per-trial outputs."""
    f = sc.frequencies
    F, N = len(f), len(sc.lengths)
    ds = synthesize_dataset(sc) if ds is None else ds
    noise_sqrt = {nm: _sqrtm_psd(C) for nm, C in sc.noise_blocks().items()}
    gamma_est = np.ascontiguousarray(ds.gamma.astype(complex))
    Ms_all = np.empty((sc.trials, F, N, 2, 2), dtype=complex)
    ga_all = np.empty((sc.trials, F), dtype=complex)
    gb_all = np.empty((sc.trials, F), dtype=complex)
    md_all = np.empty((sc.trials, F, 2, 2), dtype=complex)
    for t, streams in enumerate(trial_streams(sc.seed, sc.trials)):
        Ms_all[t], ga_all[t], gb_all[t], md_all[t] = draw_trial(sc, ds, streams, noise_sqrt)
    KK = sc.trials * F
    params, status = K.solve_batch(np.ascontiguousarray(Ms_all.reshape(KK, N, 2, 2)), sc.lineset.dl, sc.thru,
                                   np.ascontiguousarray(ga_all.ravel()), np.ascontiguousarray(gb_all.ravel()),
                                   sc.reflect_estimate, np.ascontiguousarray(np.tile(gamma_est, sc.trials)), 1.0 + 0j)
    ok = K.is_valid(status).reshape(sc.trials, F).all(axis=1)
    T = K.apply_batch(params, np.ascontiguousarray(md_all.reshape(KK, 2, 2)))
    S = nw.t_to_s(np.where(np.isfinite(T), T, 1.0)).reshape(sc.trials, F, 2, 2)
    g = params[:, 9].reshape(sc.trials, F)
    samples = {
        "ereff": mtrl.ereff_from_gamma(g, f)[ok],
        "loss_db_per_m": mtrl.loss_db_per_m(g)[ok],
        "|S11|": np.abs(S[..., 0, 0])[ok],
        "|S21|": np.abs(S[..., 1, 0])[ok],
    }
    res = McResult(f, samples, sc.trials, int((~ok).sum()))
    if res.drop_rate > max_drop_rate:
        raise McFailure(f"{res.n_dropped} of {sc.trials} trials failed (> {max_drop_rate:.0%})")
    return res


def linear_prediction(sc, ds=None, threads=1):
    """Linear propagation for the scenario's source set; returns (PropagationResult, std dict)."""
    ds = synthesize_dataset(sc) if ds is None else ds
    sol = mtrl.MultilineTRL(ds.lines, ds.reflect, ds.lineset).run()
    mism = {}
    if sc.mismatch and np.any(sc.geometry.uncertainties() > 0):
        sgg = np.stack([cpw.sigma_gamma_z(sc.geometry, fi) for fi in sc.frequencies])
        mism = gum.mismatch_blocks(sol, sgg)
    spec = gum.UncertaintySpec(noise=sc.noise_blocks(), mismatch=mism, length_std=sc.length_std,
                               reflect_offset_std=sc.reflect_offset_std)
    res = gum.propagate_calibration(ds.lines, ds.reflect, ds.lineset, spec, dut=ds.dut, names=sc.names,
                                    threads=threads, solution=sol)
    std = {}
    for q in QUANTITIES:
        rows = {r.frequency: r for r in res.budget_by_source.select(q)}
        std[q] = np.array([rows[float(fi)].std if float(fi) in rows else np.nan for fi in sc.frequencies])
    return res, std


@dataclass
class Comparison:
    frequencies: np.ndarray
    rel_error: dict          # quantity -> (F,) |s_lin - s_mc| / s_mc (nan if incomparable)
    incomparable: dict       # quantity -> list of frequency indices
    tolerance: float

    @property
    def summary(self):
        return {q: float(np.nanmean(e)) for q, e in self.rel_error.items()}

    @property
    def passed(self):
        return {q: bool(v <= self.tolerance) for q, v in self.summary.items()}

    def to_dict(self):
        return {"tolerance": self.tolerance, "summary": self.summary, "passed": self.passed,
                "frequencies_hz": self.frequencies.tolist(),
                "rel_error": {q: [None if not np.isfinite(x) else float(x) for x in e]
                              for q, e in self.rel_error.items()},
                "incomparable": {q: [int(i) for i in v] for q, v in self.incomparable.items()}}


def compare_linear_vs_mc(mc_std, lin_std, frequencies, tolerance=0.10):
    """Per-quantity relative std error |s_lin - s_mc| / s_mc and its frequency average."""
    rel, bad = {}, {}
    for q in mc_std:
        if q not in lin_std:
            continue
        m = np.asarray(mc_std[q], dtype=float)
        l = np.asarray(lin_std[q], dtype=float)
        if m.shape != l.shape:
            raise ValueError(f"{q}: grids differ")
        e = np.full(m.shape, np.nan)
        nz = m > 0
        e[nz] = np.abs(l[nz] - m[nz]) / m[nz]
        both0 = (~nz) & (l == 0)
        e[both0] = 0.0
        rel[q] = e
        bad[q] = list(np.flatnonzero((~nz) & (l != 0)))
    return Comparison(np.asarray(frequencies), rel, bad, tolerance)
