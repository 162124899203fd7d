"""Two-port S/T/wave-parameter data, Touchstone v1 files and sample covariance.

Real-split ordering used for every 8x8 covariance in this package ("vecRI"):
``[Re S11, Im S11, Re S21, Im S21, Re S12, Im S12, Re S22, Im S22]``
(column-stacked vectorization of the 2x2 matrix, real/imag interleaved).
"""

import json
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk

VEC_ORDERING = "vecRI"


class TouchstoneError(ValueError):
    pass


class NonTransmissiveError(ValueError):
    """S21 (or T22) vanishes so the T-parameters do not exist."""


@dataclass
class TwoPortRecord:
    """Frequency sweep of a two-port: S-parameters and optional wave matrices.

    ``a`` and ``b`` are per-frequency 2x2 matrices of incident and reflected
    waves indexed [receiver port, source port].
    """
    frequencies: np.ndarray
    s: np.ndarray
    a: np.ndarray = None
    b: np.ndarray = None
    z0: float = 50.0
    comments: list = field(default_factory=list)

    def __post_init__(self):
        self.frequencies = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        self.s = np.asarray(self.s, dtype=complex).reshape(-1, 2, 2)
        if self.s.shape[0] != self.frequencies.size:
            raise ValueError("number of S-matrices does not match number of frequencies")
        if self.frequencies.size > 1 and np.any(np.diff(self.frequencies) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        if not np.all(np.isfinite(self.s)):
            raise ValueError("S-parameters contain non-finite values")

    def __len__(self):
        return self.frequencies.size

    @property
    def t(self):
        return s_to_t(self.s)

    @classmethod
    def from_waves(cls, frequencies, a, b, **kw):
        a = np.asarray(a, dtype=complex).reshape(-1, 2, 2)
        b = np.asarray(b, dtype=complex).reshape(-1, 2, 2)
        return cls(frequencies, s_from_waves(a, b), a=a, b=b, **kw)


# -- conversions ------------------------------------------------------------------
def s_to_t(S):
    """S- to T-parameters; a matched line maps to ``diag(exp(-gl), exp(gl))``.

    Works on plain arrays of shape (..., 2, 2) and on 2x2 UncArrays.
    """
    if isinstance(S, nk.UncArray):
        s11, s12, s21, s22 = S[0, 0], S[0, 1], S[1, 0], S[1, 1]
        if abs(s21.value) == 0:
            raise NonTransmissiveError("non-transmissive network: S21 = 0")
        return nk.stack([nk.stack([s12 - s11 * s22 / s21, s11 / s21]),
                         nk.stack([-s22 / s21, 1 / s21])])
    S = np.asarray(S, dtype=complex)
    s11, s12, s21, s22 = S[..., 0, 0], S[..., 0, 1], S[..., 1, 0], S[..., 1, 1]
    if np.any(s21 == 0):
        raise NonTransmissiveError("non-transmissive network: S21 = 0")
    T = np.empty_like(S)
    T[..., 0, 0] = s12 - s11 * s22 / s21
    T[..., 0, 1] = s11 / s21
    T[..., 1, 0] = -s22 / s21
    T[..., 1, 1] = 1 / s21
    return T


def t_to_s(T):
    """T- to S-parameters (inverse of :func:`s_to_t`)."""
    if isinstance(T, nk.UncArray):
        t11, t12, t21, t22 = T[0, 0], T[0, 1], T[1, 0], T[1, 1]
        if abs(t22.value) == 0:
            raise NonTransmissiveError("T22 = 0")
        return nk.stack([nk.stack([t12 / t22, t11 - t12 * t21 / t22]),
                         nk.stack([1 / t22, -t21 / t22])])
    T = np.asarray(T, dtype=complex)
    t11, t12, t21, t22 = T[..., 0, 0], T[..., 0, 1], T[..., 1, 0], T[..., 1, 1]
    if np.any(t22 == 0):
        raise NonTransmissiveError("T22 = 0")
    S = np.empty_like(T)
    S[..., 0, 0] = t12 / t22
    S[..., 0, 1] = t11 - t12 * t21 / t22
    S[..., 1, 0] = 1 / t22
    S[..., 1, 1] = -t21 / t22
    return S


def s_from_waves(a, b):
    """S = b' a'^-1 from switch-corrected wave matrices (plain, shape (..., 2, 2))."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    d = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    scale = np.abs(a).max(axis=(-2, -1)) ** 2
    bad = np.abs(d) <= 1e-14 * np.where(scale > 0, scale, 1)
    if np.any(bad):
        idx = np.flatnonzero(np.atleast_1d(bad))
        raise ValueError(f"singular incident-wave matrix at frequency index {idx.tolist()}")
    return b @ np.linalg.inv(a)


# -- Touchstone v1 ------------------------------------------------------------------
_UNITS = {"HZ": 1.0, "KHZ": 1e3, "MHZ": 1e6, "GHZ": 1e9}


def _parse_option_line(line):
    tokens = line[1:].upper().split()
    unit, param, fmt, z0 = "GHZ", "S", "MA", 50.0
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok in _UNITS:
            unit = tok
        elif tok in ("S", "Y", "Z", "H", "G"):
            param = tok
        elif tok in ("MA", "DB", "RI"):
            fmt = tok
        elif tok == "R":
            if i + 1 >= len(tokens):
                raise TouchstoneError("option line: missing reference impedance after R")
            try:
                z0 = float(tokens[i + 1])
            except ValueError as exc:
                raise TouchstoneError(f"option line: bad reference impedance {tokens[i + 1]!r}") from exc
            i += 1
        else:
            raise TouchstoneError(f"option line: unknown token {tok!r}")
        i += 1
    if param != "S":
        raise TouchstoneError(f"only S-parameter files are supported, got {param}")
    return _UNITS[unit], fmt, z0


def _pair_to_complex(x, y, fmt):
    if fmt == "RI":
        return x + 1j * y
    mag = x if fmt == "MA" else 10 ** (x / 20)
    return mag * np.exp(1j * np.deg2rad(y))


def read_touchstone(path):
    """Read a 2-port Touchstone v1 file (RI, MA or DB) into a :class:`TwoPortRecord`."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if re.fullmatch(r"\.s\d+p", ext) and ext != ".s2p":
        raise TouchstoneError(f"{path}: only 2-port files are supported")
    option = None
    values = []
    comments = []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if line.startswith("!"):
                comments.append(line[1:].strip())
                continue
            line = line.split("!", 1)[0].strip()
            if not line:
                continue
            if line.startswith("#"):
                if option is not None:
                    raise TouchstoneError(f"{path}: multiple option lines")
                option = _parse_option_line(line)
                continue
            if line.startswith("["):
                raise TouchstoneError(f"{path}: Touchstone v2 keywords are not supported")
            try:
                values.extend(float(v) for v in line.split())
            except ValueError as exc:
                raise TouchstoneError(f"{path}: malformed data line {line!r}") from exc
    if option is None:
        raise TouchstoneError(f"{path}: missing option line")
    scale, fmt, z0 = option
    if len(values) % 9:
        raise TouchstoneError(f"{path}: data is not a multiple of 9 columns (port count must be 2)")
    data = np.asarray(values).reshape(-1, 9)
    freqs = data[:, 0] * scale
    if freqs.size > 1 and np.any(np.diff(freqs) <= 0):
        raise TouchstoneError(f"{path}: frequencies are not strictly increasing")
    # column order in v1 2-port files: S11 S21 S12 S22
    s = np.empty((len(freqs), 2, 2), dtype=complex)
    s[:, 0, 0] = _pair_to_complex(data[:, 1], data[:, 2], fmt)
    s[:, 1, 0] = _pair_to_complex(data[:, 3], data[:, 4], fmt)
    s[:, 0, 1] = _pair_to_complex(data[:, 5], data[:, 6], fmt)
    s[:, 1, 1] = _pair_to_complex(data[:, 7], data[:, 8], fmt)
    return TwoPortRecord(freqs, s, z0=z0, comments=comments)


def write_touchstone(record, path, comments=None):
    """Write ``record`` as RI Touchstone v1 with frequencies in Hz (17 significant digits)."""
    lines = [f"! {c}" for c in (comments if comments is not None else record.comments)]
    lines.append(f"# HZ S RI R {record.z0:g}")
    for f, s in zip(record.frequencies, record.s):
        vals = [s[0, 0], s[1, 0], s[0, 1], s[1, 1]]
        cols = [repr(float(f))] + [f"{x:.17e}" for v in vals for x in (v.real, v.imag)]
        lines.append(" ".join(cols))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- wave-parameter container ----------------------------------------------------------
def _cplx_to_json(z):
    z = np.asarray(z, dtype=complex)
    return np.stack([z.real, z.imag], axis=-1).tolist()


def _json_to_cplx(x):
    x = np.asarray(x, dtype=float)
    return x[..., 0] + 1j * x[..., 1]


def write_waves_json(record, path):
    if record.a is None or record.b is None:
        raise ValueError("record has no wave data")
    doc = {"format": "two-port-waves", "frequencies_hz": record.frequencies.tolist(),
           "a": _cplx_to_json(record.a), "b": _cplx_to_json(record.b)}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def read_waves_json(path):
    """Read a wave sweep: ``{"frequencies_hz", "a", "b"}`` with [re, im] pairs, [freq][recv][src]."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        f = doc["frequencies_hz"]
        a = _json_to_cplx(doc["a"])
        b = _json_to_cplx(doc["b"])
    except KeyError as exc:
        raise ValueError(f"{path}: missing field {exc}") from exc
    return TwoPortRecord.from_waves(f, a, b)


def read_sweep(path):
    """Load one sweep file (.s2p or wave .json)."""
    if os.fspath(path).lower().endswith(".json"):
        return read_waves_json(path)
    return read_touchstone(path)


# -- sample covariance -------------------------------------------------------------------
def vec_ri(s):
    """vecRI real split of S (..., 2, 2) -> (..., 8)."""
    s = np.asarray(s, dtype=complex)
    v = np.stack([s[..., 0, 0], s[..., 1, 0], s[..., 0, 1], s[..., 1, 1]], axis=-1)
    out = np.empty(v.shape[:-1] + (8,))
    out[..., 0::2] = v.real
    out[..., 1::2] = v.imag
    return out


def sample_covariance(sweeps):
    """Per-frequency unbiased 8x8 covariance of S (vecRI) over repeated sweeps.

    Returns ``(cov, mean)`` with ``cov`` shaped (n_freq, 8, 8) and ``mean`` a
    :class:`TwoPortRecord` of the averaged S-parameters.
    """
    sweeps = list(sweeps)
    if len(sweeps) < 2:
        raise ValueError("at least two sweeps are required for a sample covariance")
    f0 = sweeps[0].frequencies
    for sw in sweeps[1:]:
        if sw.frequencies.shape != f0.shape or not np.allclose(sw.frequencies, f0, rtol=1e-12, atol=0):
            raise ValueError("sweeps do not share the same frequency grid")
    h = np.stack([vec_ri(sw.s) for sw in sweeps])          # (n, F, 8)
    h = h - h[0]                                            # shifted data: identical sweeps give exact zeros
    d = h - h.mean(axis=0)
    cov = np.einsum("nfi,nfj->fij", d, d) / (len(sweeps) - 1)
    cov = (cov + np.swapaxes(cov, -1, -2)) / 2
    mean_s = np.stack([s.s for s in sweeps]).mean(axis=0)
    return cov, TwoPortRecord(f0, mean_s, z0=sweeps[0].z0)


# -- covariance sets and files ------------------------------------------------------------
@dataclass
class CovarianceSet:
    """Per-frequency 8x8 measurement covariance blocks of one standard.

    ``noise``, ``forward`` and ``inverse`` hold the noise, forward-model and
    inverse-model contributions; ``total`` is their sum.
    """
    standard_id: str
    frequencies: np.ndarray
    noise: np.ndarray = None
    forward: np.ndarray = None
    inverse: np.ndarray = None
    n_samples: int = None

    def __post_init__(self):
        self.frequencies = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        nf = self.frequencies.size
        for name in ("noise", "forward", "inverse"):
            blk = getattr(self, name)
            if blk is None:
                blk = np.zeros((nf, 8, 8))
            blk = np.asarray(blk, dtype=float).reshape(nf, 8, 8)
            setattr(self, name, blk)

    @property
    def total(self):
        return assemble_total_covariance(self.noise, self.forward, self.inverse, label=self.standard_id)


def assemble_total_covariance(noise=None, forward=None, inverse=None, label="standard"):
    """Sum of noise, forward-model and inverse-model covariance blocks (missing terms are zero)."""
    blocks = [np.asarray(b, dtype=float) for b in (noise, forward, inverse) if b is not None]
    if not blocks:
        raise ValueError("no covariance blocks given")
    shape = blocks[0].shape
    for b in blocks:
        if b.shape != shape:
            raise ValueError(f"{label}: covariance blocks are not conformable ({b.shape} vs {shape})")
    total = sum(blocks)
    flat = total.reshape(-1, shape[-2], shape[-1])
    for i, blk in enumerate(flat):
        nk.check_psd(blk, f"{label} total covariance, block {i}")
    return (total + np.swapaxes(total, -1, -2)) / 2


def write_covariance_json(path, standard_id, frequencies, sigma, n_samples=None):
    sigma = np.asarray(sigma, dtype=float).reshape(-1, 8, 8)
    doc = {"standard-id": standard_id,
           "frequencies_hz": [float(f) for f in np.atleast_1d(frequencies)],
           "sigma": [[float(x) for x in blk.ravel()] for blk in sigma],
           "ordering": VEC_ORDERING}
    if n_samples is not None:
        doc["n_samples"] = int(n_samples)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def read_covariance_json(path):
    """Read a covariance file -> (standard_id, frequencies, sigma[F, 8, 8], n_samples)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("ordering") != VEC_ORDERING:
        raise ValueError(f"{path}: unsupported covariance ordering {doc.get('ordering')!r}")
    f = np.asarray(doc["frequencies_hz"], dtype=float)
    sigma = np.asarray(doc["sigma"], dtype=float)
    if sigma.shape != (f.size, 64):
        raise ValueError(f"{path}: expected {f.size} blocks of 64 values, got shape {sigma.shape}")
    sigma = sigma.reshape(-1, 8, 8)
    for i, blk in enumerate(sigma):
        nk.check_psd(blk, f"{path} block {i}")
    return doc["standard-id"], f, sigma, doc.get("n_samples")


def interp_blocks(freq_src, blocks, freq_dst):
    """Match covariance blocks to a frequency grid (exact match or linear interpolation)."""
    freq_src = np.asarray(freq_src, float)
    freq_dst = np.asarray(freq_dst, float)
    if freq_src.shape == freq_dst.shape and np.allclose(freq_src, freq_dst, rtol=1e-12, atol=0):
        return np.asarray(blocks)
    if freq_dst.min() < freq_src.min() * (1 - 1e-12) or freq_dst.max() > freq_src.max() * (1 + 1e-12):
        raise ValueError("covariance file does not cover the measurement frequency range")
    flat = np.asarray(blocks).reshape(len(freq_src), -1)
    out = np.stack([np.interp(freq_dst, freq_src, flat[:, j]) for j in range(flat.shape[1])], axis=1)
    return out.reshape((len(freq_dst),) + np.asarray(blocks).shape[1:])


def _isfinite_number(x):
    return isinstance(x, (int, float)) and math.isfinite(x)
