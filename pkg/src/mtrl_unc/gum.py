"""First-order (GUM) uncertainty propagation through the multiline TRL chain and budgets."""

import csv
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from . import mismatch
from . import mtrl
from . import network as nw
from . import numkit as nk

KINDS = ("noise", "length", "reflect-asymmetry", "line-mismatch", "other-forward")
Z95 = 1.96


@dataclass
class UncertaintySource:
    kind: str
    target: str
    source_ids: list

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown uncertainty kind {self.kind!r}")


def sources_of(registry):
    out = {}
    for e in registry.entries:
        key = (e.kind, e.standard)
        out.setdefault(key, UncertaintySource(e.kind, e.standard, []))
        out[key].source_ids.append(e.source_id)
    return list(out.values())


assemble_total_covariance = nw.assemble_total_covariance


@dataclass
class UncertaintySpec:
    """Input uncertainties for a sweep.

    ``noise``: standard name -> (F, 8, 8) S-parameter covariance (vecRI);
    ``mismatch``: line index -> (F, 8, 8) T-domain covariance of the raw line
    measurement; ``length_std``: scalar or per-line (m);
    ``reflect_offset_std``: per-port reflect offset std (m);
    ``reflect_estimate_cov``: 2x2 covariance of (Re, Im) of the reflect estimate.
    """
    noise: dict = field(default_factory=dict)
    mismatch: dict = field(default_factory=dict)
    length_std: object = 0.0
    reflect_offset_std: float = 0.0
    reflect_estimate_cov: np.ndarray = None


def standard_names(n_lines, thru=0, names=None):
    if names is not None:
        if len(names) != n_lines:
            raise ValueError("one name per line is required")
        return list(names)
    return ["thru" if i == thru else f"line{i}" for i in range(n_lines)]


@dataclass
class PointPropagation:
    frequency: float
    registry: nk.InputRegistry
    params: nk.UncArray
    outputs: dict
    status: int


def _block(d, key, i, default):
    if key in d and d[key] is not None:
        return np.asarray(d[key][i], dtype=float)
    return default


def propagate_point(i, f, S_lines, S_reflect, S_dut, lines, gamma_est, spec, names=None):
    """Build the registry at frequency index ``i`` and run the uncertain calibration.

    ``S_lines``: (N, 2, 2); ``S_reflect``: (2, 2); ``S_dut``: (2, 2) or None.
    Outputs: ``ereff``, ``loss_db_per_m`` and, with a DUT, ``|S11|``, ``|S21|``,
    ``|S12|``, ``|S22|`` (real UncArrays) plus the complex corrected ``S``.
    """
    N = lines.n
    names = standard_names(N, lines.thru, names)
    z8 = np.zeros((8, 8))
    reg = nk.InputRegistry()
    ls = np.broadcast_to(np.asarray(spec.length_std, dtype=float), (N,))
    ids = []
    for j in range(N):
        nm = names[j]
        sn = reg.register_input(f"{nm}:noise", nw.vec_ri(S_lines[j]), _block(spec.noise, nm, i, z8),
                                kind="noise", standard=nm)
        sm = reg.register_input(f"{nm}:mismatch", np.zeros(8), _block(spec.mismatch, j, i, z8),
                                kind="line-mismatch", standard=nm)
        sl = reg.register_input(f"{nm}:length", [lines.lengths[j]], ls[j] ** 2, kind="length", standard=nm)
        ids.append((sn, sm, sl))
    sr = reg.register_input("reflect:noise", nw.vec_ri(S_reflect), _block(spec.noise, "reflect", i, z8),
                            kind="noise", standard="reflect")
    so = reg.register_input("reflect:offset", np.zeros(2), spec.reflect_offset_std ** 2,
                            kind="reflect-asymmetry", standard="reflect")
    gcov = np.zeros((2, 2)) if spec.reflect_estimate_cov is None else spec.reflect_estimate_cov
    g0 = lines.reflect_estimate
    sg = reg.register_input("reflect:estimate", [g0.real, g0.imag], gcov, kind="other-forward",
                            standard="reflect")
    sd = None
    if S_dut is not None:
        sd = reg.register_input("dut:noise", nw.vec_ri(S_dut), _block(spec.noise, "dut", i, z8),
                                kind="noise", standard="dut")
    reg.freeze()

    line_t, lvec = [], []
    for sn, sm, sl in ids:
        S = reg.complex(sn, (2, 2))
        line_t.append(nw.s_to_t(S) + reg.complex(sm, (2, 2)))
        lvec.append(reg.real(sl)[0])
    lvec = nk.stack(lvec)
    dl = lvec - lvec[lines.thru]
    Sr = reg.complex(sr, (2, 2))
    off = reg.real(so)
    reg.complex(sg)  # the estimate only selects a root; its sensitivity is zero

    def ratio(gamma):
        return nk.exp(gamma * (off[1] - off[0]) * (-2))

    res = mtrl.calibrate_point(line_t, dl, lines, Sr[0, 0], Sr[1, 1], gamma_est, ratio)
    g = res.params[9]
    out = {"ereff": mtrl.ereff_from_gamma(g, f), "loss_db_per_m": mtrl.loss_db_per_m(g)}
    if sd is not None:
        Sd = reg.complex(sd, (2, 2))
        S = mtrl.apply_calibration(res.params, nw.s_to_t(Sd))
        out["S"] = S
        for (r, c), nm in zip([(0, 0), (1, 0), (0, 1), (1, 1)], ["|S11|", "|S21|", "|S12|", "|S22|"]):
            out[nm] = nk.absolute(S[r, c])
    return PointPropagation(float(f), reg, res.params, out, res.status)


def mismatch_blocks(solution, sigma_gg):
    """Per-line (F, 8, 8) mismatch covariance from the nominal solution.

    ``sigma_gg``: (F, 4, 4) or (4, 4) covariance of (Re Gamma, Im Gamma, Re gamma, Im gamma)
    shared by all lines.
    """
    lines = solution.lines
    F = len(solution.frequencies)
    sg = np.broadcast_to(np.asarray(sigma_gg, dtype=float), (F, 4, 4))
    out = {}
    for j in range(lines.n):
        blk = np.zeros((F, 8, 8))
        if lines.dl[j] != 0:
            for i in range(F):
                if solution.valid[i]:
                    blk[i] = mismatch.sigma_I_for_line(solution.params[i], lines.dl[j], sg[i])
        out[j] = blk
    return out


@dataclass
class PropagationResult:
    solution: mtrl.CalibrationSolution
    points: list
    budget_by_source: "BudgetReport" = None
    budget_by_standard: "BudgetReport" = None


def propagate_calibration(lines_data, reflect, lineset, spec, dut=None, names=None, threads=1,
                          solution=None):
    """Nominal sweep, then per-frequency uncertain calibration with full covariance.

    Returns a :class:`PropagationResult` whose solution carries the 20x20
    parameter covariance per frequency; flagged frequencies are skipped.
    """
    if solution is None:
        solution = mtrl.MultilineTRL(lines_data, reflect, lineset).run()
    f = solution.frequencies
    S_lines = np.stack([r.s for r in lines_data], axis=1)

    def one(i):
        if not solution.valid[i]:
            return None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                return propagate_point(i, f[i], S_lines[i], reflect.s[i], None if dut is None else dut.s[i],
                                       lineset, solution.gamma_est[i], spec, names)
            except (mtrl.CalibrationError, nk.SingularMatrixError, nk.DegenerateLineSet, ValueError):
                return None

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            points = list(ex.map(one, range(len(f))))
    else:
        points = [one(i) for i in range(len(f))]
    cov = np.full((len(f), 20, 20), np.nan)
    status = solution.status.copy()
    for i, pt in enumerate(points):
        if pt is None:
            if solution.valid[i]:
                status[i] |= K.ST_SINGULAR_X
            continue
        cov[i] = nk.covariance(pt.params, pt.registry)
    sol = mtrl.CalibrationSolution(f, solution.params, status, solution.gamma_est, cov, lineset,
                                   dict(solution.extra))
    res = PropagationResult(sol, points)
    res.budget_by_source = budget(points, "by-source")
    res.budget_by_standard = budget(points, "by-standard")
    return res


# -- budgets -------------------------------------------------------------------
QUANTITIES = ("ereff", "loss_db_per_m", "|S11|", "|S21|", "|S12|", "|S22|")


@dataclass
class BudgetRow:
    frequency: float
    quantity: str
    value: float
    variances: dict

    @property
    def total_variance(self):
        # summed in a fixed (sorted) order so emitted totals are reproducible
        return float(sum(self.variances[g] for g in sorted(self.variances)))

    @property
    def std(self):
        return float(np.sqrt(self.total_variance))


@dataclass
class BudgetReport:
    grouping: str
    rows: list

    @property
    def groups(self):
        gs = set()
        for r in self.rows:
            gs.update(r.variances)
        return sorted(gs)

    def select(self, quantity):
        return [r for r in self.rows if r.quantity == quantity]

    def to_csv(self, path):
        """Long format: frequency_hz, quantity, group, variance, share (one row per group)
        plus a ``total`` row per frequency and quantity."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frequency_hz", "quantity", "grouping", "group", "variance", "share"])
            for r in self.rows:
                tot = r.total_variance
                for g in sorted(r.variances):
                    v = r.variances[g]
                    w.writerow([repr(r.frequency), r.quantity, self.grouping, g, repr(float(v)),
                                repr(float(v / tot)) if tot > 0 else "0.0"])
                w.writerow([repr(r.frequency), r.quantity, self.grouping, "total", repr(tot), "1.0"])

    def to_dict(self):
        return {"grouping": self.grouping, "groups": self.groups,
                "rows": [{"frequency_hz": r.frequency, "quantity": r.quantity, "value": r.value,
                          "std": r.std, "lo95": r.value - Z95 * r.std, "hi95": r.value + Z95 * r.std,
                          "total_variance": r.total_variance,
                          "variances": {g: float(r.variances[g]) for g in sorted(r.variances)}}
                         for r in self.rows]}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def group_variances(x, registry, key):
    """Variance of scalar real ``x`` split into the registry groups ``key`` ('kind' or 'standard')."""
    J = nk.jacobian(x, real_valued=True)[0]
    cov = registry.covariance()
    out = {}
    for g, idx in registry.groups(key).items():
        Jg = J[idx]
        out[g] = float(Jg @ cov[np.ix_(idx, idx)] @ Jg)
    return out


def budget(points, grouping="by-source", quantities=QUANTITIES):
    key = {"by-source": "kind", "by-standard": "standard"}.get(grouping)
    if key is None:
        raise ValueError(f"unknown grouping {grouping!r}; use 'by-source' or 'by-standard'")
    rows = []
    for pt in points:
        if pt is None:
            continue
        for q in quantities:
            if q not in pt.outputs:
                continue
            x = pt.outputs[q]
            rows.append(BudgetRow(pt.frequency, q, float(x.value.real),
                                  group_variances(x, pt.registry, key)))
    return BudgetReport(grouping, rows)


def summary_table(report):
    """Plot-ready rows: (quantity, frequency, value, std, lo95, hi95)."""
    return [(r.quantity, r.frequency, r.value, r.std, r.value - Z95 * r.std, r.value + Z95 * r.std)
            for r in report.rows]


def write_summary_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "frequency_hz", "value", "std", "lo95", "hi95"])
        for row in summary_table(report):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def makedirs(path):
    os.makedirs(path, exist_ok=True)
    return path
