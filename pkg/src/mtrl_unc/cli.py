"""Command-line front end: ``mtrl-unc {calibrate,apply,uncert,mc,synth,cov}``.

Exit codes: 0 success, 2 data/input errors, 3 numerical failures (including a
flagged-frequency fraction above ``--fail-threshold``).
"""

import argparse
import csv
import glob
import json
import os
import sys

import numpy as np

from . import cpw
from . import gum
from . import kernels as K
from . import mc
from . import mtrl
from . import network as nw
from . import numkit as nk

EXIT_DATA = 2
EXIT_NUMERIC = 3


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


# -- small JSON helpers ------------------------------------------------------------
def _c2l(z):
    z = complex(z)
    return [z.real, z.imag]


def _l2c(v):
    if isinstance(v, (int, float)):
        return complex(v)
    if isinstance(v, (list, tuple)) and len(v) == 2:
        return complex(float(v[0]), float(v[1]))
    raise DataError(f"expected a complex number as [re, im], got {v!r}")


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _fmt(x):
    return repr(float(x))


# -- recipe --------------------------------------------------------------------------
class Recipe:
    """Calibration recipe (JSON). Paths are relative to the recipe file.

    ::

        {"lines": [{"name": "thru", "path": "thru.s2p", "length_m": 2e-4,
                    "noise_cov": "thru_cov.json"}, ...],
         "thru": 0,
         "reflect": {"path": "reflect.s2p", "estimate": [1, 0], "offset_std": 4e-5,
                     "noise_cov": "reflect_cov.json"},
         "ereff_guess": 5.0, "length_std": 4e-5,
         "mismatch": {"geometry": {...} | "geometry.json"},
         "dut": {"path": "dut.s2p", "noise_cov": "dut_cov.json"}}
    """

    def __init__(self, path, eps_guess=None):
        self.path = path
        self.base = os.path.dirname(os.path.abspath(path))
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError as exc:
            raise DataError(f"recipe not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
        self.doc = doc
        try:
            lines = doc["lines"]
            self.names = [ln.get("name", f"line{i}") for i, ln in enumerate(lines)]
            lengths = [float(ln["length_m"]) for ln in lines]
            self.line_records = [self._read(ln["path"]) for ln in lines]
            refl = doc["reflect"]
            self.reflect = self._read(refl["path"])
            est = _l2c(refl.get("estimate", [1.0, 0.0]))
            guess = float(doc.get("ereff_guess", 1.0)) if eps_guess is None else float(eps_guess)
            self.lineset = mtrl.LineSet(lengths, int(doc.get("thru", 0)), est, guess)
            self.dut = self._read(doc["dut"]["path"]) if doc.get("dut") else None
        except KeyError as exc:
            raise DataError(f"{path}: missing recipe field {exc}") from exc
        if len(set(self.names)) != len(self.names):
            raise DataError(f"{path}: line names must be unique")
        self.frequencies = self.line_records[0].frequencies
        for rec in self.line_records + [self.reflect] + ([self.dut] if self.dut else []):
            if rec.frequencies.shape != self.frequencies.shape or \
                    not np.allclose(rec.frequencies, self.frequencies, rtol=1e-12, atol=0):
                raise DataError("all recipe files must share one frequency grid")

    def _abs(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base, p)

    def _read(self, p):
        full = self._abs(p)
        if not os.path.exists(full):
            raise DataError(f"file not found: {full}")
        try:
            return nw.read_sweep(full)
        except (ValueError, KeyError) as exc:
            raise DataError(f"{full}: {exc}") from exc

    def _cov(self, ref, name):
        if not ref:
            return None
        full = self._abs(ref)
        if not os.path.exists(full):
            raise DataError(f"covariance file not found: {full}")
        try:
            _, f, sigma, _ = nw.read_covariance_json(full)
            return nw.interp_blocks(f, sigma, self.frequencies)
        except (ValueError, KeyError) as exc:
            raise DataError(f"{full}: {exc}") from exc

    def uncertainty_spec(self, solution):
        doc = self.doc
        noise = {}
        for nm, ln in zip(self.names, doc["lines"]):
            c = self._cov(ln.get("noise_cov"), nm)
            if c is not None:
                noise[nm] = c
        for key in ("reflect", "dut"):
            if doc.get(key):
                c = self._cov(doc[key].get("noise_cov"), key)
                if c is not None:
                    noise[key] = c
        mism = {}
        m = doc.get("mismatch")
        if m:
            g = m.get("geometry")
            try:
                geom = cpw.CpwGeometry.from_json(self._abs(g)) if isinstance(g, str) else cpw.CpwGeometry.from_dict(g)
            except (OSError, ValueError, TypeError) as exc:
                raise DataError(f"mismatch geometry: {exc}") from exc
            sgg = np.stack([cpw.sigma_gamma_z(geom, f) for f in self.frequencies])
            mism = gum.mismatch_blocks(solution, sgg)
        ls = doc.get("length_std", 0.0)
        refl = doc["reflect"]
        ecov = refl.get("estimate_cov")
        return gum.UncertaintySpec(noise=noise, mismatch=mism, length_std=ls,
                                   reflect_offset_std=float(refl.get("offset_std", 0.0)),
                                   reflect_estimate_cov=None if ecov is None else np.asarray(ecov, float))


# -- solution files ---------------------------------------------------------------
def write_solution(sol, path, names=None):
    doc = {
        "format": "mtrl-solution",
        "param_names": list(mtrl.PARAM_NAMES),
        "frequencies_hz": [float(f) for f in sol.frequencies],
        "params": [[_c2l(z) for z in row] for row in sol.params],
        "status": [int(s) for s in sol.status],
        "gamma_est": [_c2l(z) for z in sol.gamma_est],
        "lengths_m": sol.lines.lengths.tolist(),
        "thru": sol.lines.thru,
        "reflect_estimate": _c2l(sol.lines.reflect_estimate),
        "cov_ordering": "vecRI over params",
        "cov": [None if (sol.cov is None or not np.all(np.isfinite(c))) else [float(x) for x in c.ravel()]
                for c in (sol.cov if sol.cov is not None else [None] * len(sol.frequencies))],
    }
    if names:
        doc["names"] = list(names)
    _dump_json(doc, path)


def read_solution(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"solution not found: {path}") from exc
    f = np.asarray(doc["frequencies_hz"], float)
    p = np.asarray(doc["params"], float)
    params = p[..., 0] + 1j * p[..., 1]
    cov = np.full((len(f), 20, 20), np.nan)
    for i, c in enumerate(doc.get("cov", [])):
        if c is not None:
            cov[i] = np.asarray(c, float).reshape(20, 20)
    ge = np.asarray(doc["gamma_est"], float)
    lines = mtrl.LineSet(doc["lengths_m"], doc["thru"], _l2c(doc["reflect_estimate"]))
    return mtrl.CalibrationSolution(f, params, np.asarray(doc["status"], dtype=np.int64),
                                    ge[:, 0] + 1j * ge[:, 1], cov, lines)


def _std_from_cov(cov, i):
    return float(np.sqrt(max(cov[i, i], 0.0))) if np.isfinite(cov[i, i]) else float("nan")


def write_table(path, rows):
    """Plot-ready table: quantity, frequency_hz, value, std, lo95, hi95."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "frequency_hz", "value", "std", "lo95", "hi95"])
        for q, f, v, s in rows:
            w.writerow([q, _fmt(f), _fmt(v), _fmt(s), _fmt(v - gum.Z95 * s), _fmt(v + gum.Z95 * s)])


def _table_json(rows):
    return [{"quantity": q, "frequency_hz": float(f), "value": float(v), "std": float(s),
             "lo95": float(v - gum.Z95 * s), "hi95": float(v + gum.Z95 * s)} for q, f, v, s in rows]


def solution_rows(sol, points=None):
    rows = []
    for i, f in enumerate(sol.frequencies):
        if not sol.valid[i]:
            continue
        c = sol.cov[i] if sol.cov is not None else np.zeros((20, 20))
        pt = points[i] if points is not None else None
        for j, nm in enumerate(mtrl.PARAM_NAMES):
            z = sol.params[i, j]
            rows.append((f"Re {nm}", f, z.real, _std_from_cov(c, 2 * j)))
            rows.append((f"Im {nm}", f, z.imag, _std_from_cov(c, 2 * j + 1)))
        for q in ("ereff", "loss_db_per_m"):
            if pt is not None:
                x = pt.outputs[q]
                s = float(np.sqrt(nk.covariance(x, pt.registry, real_valued=True)[0, 0]))
                rows.append((q, f, float(x.value.real), s))
            else:
                v = sol.ereff[i] if q == "ereff" else sol.loss_db[i]
                rows.append((q, f, float(v), float("nan")))
    return rows


def _check_flags(sol, threshold, out):
    flagged = sol.flagged()
    _dump_json([{"index": i, "frequency_hz": f, "reasons": r} for i, f, r in flagged],
               os.path.join(out, "flagged.json"))
    frac = len(flagged) / max(len(sol.frequencies), 1)
    if frac > threshold:
        lst = ", ".join(f"{f:.6g} Hz ({'; '.join(r)})" for _, f, r in flagged[:10])
        raise NumericError(f"{len(flagged)} flagged frequencies ({frac:.1%} > {threshold:.1%}): {lst}")


# -- subcommands -----------------------------------------------------------------------
def cmd_calibrate(args):
    rc = Recipe(args.recipe, args.eps_guess)
    sol = mtrl.MultilineTRL(rc.line_records, rc.reflect, rc.lineset).run()
    spec = rc.uncertainty_spec(sol)
    res = gum.propagate_calibration(rc.line_records, rc.reflect, rc.lineset, spec, dut=None,
                                    names=rc.names, threads=args.threads, solution=sol)
    os.makedirs(args.out, exist_ok=True)
    write_solution(res.solution, os.path.join(args.out, "solution.json"), rc.names)
    rows = solution_rows(res.solution, res.points)
    write_table(os.path.join(args.out, "calibration.csv"), rows)
    _dump_json(_table_json(rows), os.path.join(args.out, "calibration.json"))
    _check_flags(res.solution, args.fail_threshold, args.out)
    if rc.dut is not None:
        _apply(res.solution, rc.dut, (spec.noise or {}).get("dut"), args.out)
    return 0


def _apply(sol, dut, dut_cov, out):
    f = sol.frequencies
    if dut.frequencies.shape != f.shape or not np.allclose(dut.frequencies, f, rtol=1e-12, atol=0):
        raise DataError("DUT frequency grid differs from the calibration grid")
    rows = []
    S_out = np.full((len(f), 2, 2), np.nan + 0j)
    for i in range(len(f)):
        if not sol.valid[i]:
            continue
        reg = nk.InputRegistry()
        c = sol.cov[i] if sol.cov is not None and np.all(np.isfinite(sol.cov[i])) else np.zeros((20, 20))
        sp = reg.register_input("calibration", nk.real_split(sol.params[i]), c, kind="other-forward",
                                standard="calibration")
        sd = reg.register_input("dut:noise", nw.vec_ri(dut.s[i]), np.zeros((8, 8)) if dut_cov is None else dut_cov[i],
                                kind="noise", standard="dut")
        p = reg.complex(sp)
        S = mtrl.apply_calibration(p, nw.s_to_t(reg.complex(sd, (2, 2))))
        S_out[i] = S.value
        cov = nk.covariance(S, reg)
        for j, nm in enumerate(["S11", "S21", "S12", "S22"]):
            z = S.value.ravel(order="F")[j]
            rows.append((f"Re {nm}", f[i], z.real, float(np.sqrt(max(cov[2 * j, 2 * j], 0)))))
            rows.append((f"Im {nm}", f[i], z.imag, float(np.sqrt(max(cov[2 * j + 1, 2 * j + 1], 0)))))
            m = nk.absolute(S[j % 2, j // 2])
            var = nk.covariance(m, reg, real_valued=True)[0, 0]
            rows.append((f"|{nm}|", f[i], float(m.value.real), float(np.sqrt(max(var, 0)))))
    ok = sol.valid
    nw.write_touchstone(nw.TwoPortRecord(f[ok], S_out[ok]), os.path.join(out, "dut_corrected.s2p"),
                        comments=["corrected DUT"])
    write_table(os.path.join(out, "dut_uncertainty.csv"), rows)
    _dump_json(_table_json(rows), os.path.join(out, "dut_uncertainty.json"))


def cmd_apply(args):
    if not args.solution or not args.dut:
        raise DataError("apply needs --solution and --dut")
    sol = read_solution(args.solution)
    if not os.path.exists(args.dut):
        raise DataError(f"file not found: {args.dut}")
    try:
        dut = nw.read_sweep(args.dut)
    except ValueError as exc:
        raise DataError(f"{args.dut}: {exc}") from exc
    dcov = None
    if args.dut_cov:
        try:
            _, fc, sigma, _ = nw.read_covariance_json(args.dut_cov)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"{args.dut_cov}: {exc}") from exc
        dcov = nw.interp_blocks(fc, sigma, dut.frequencies)
    os.makedirs(args.out, exist_ok=True)
    _apply(sol, dut, dcov, args.out)
    return 0


def cmd_uncert(args):
    rc = Recipe(args.recipe, args.eps_guess)
    sol = mtrl.MultilineTRL(rc.line_records, rc.reflect, rc.lineset).run()
    spec = rc.uncertainty_spec(sol)
    res = gum.propagate_calibration(rc.line_records, rc.reflect, rc.lineset, spec, dut=rc.dut,
                                    names=rc.names, threads=args.threads, solution=sol)
    os.makedirs(args.out, exist_ok=True)
    for rep, tag in ((res.budget_by_source, "by_source"), (res.budget_by_standard, "by_standard")):
        rep.to_csv(os.path.join(args.out, f"budget_{tag}.csv"))
        rep.to_json(os.path.join(args.out, f"budget_{tag}.json"))
    gum.write_summary_csv(res.budget_by_source, os.path.join(args.out, "summary.csv"))
    _check_flags(res.solution, args.fail_threshold, args.out)
    return 0


def _scenario(args):
    if not args.scenario:
        sc = mc.McScenario()
    else:
        try:
            sc = mc.McScenario.from_json(args.scenario)
        except FileNotFoundError as exc:
            raise DataError(f"scenario not found: {args.scenario}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{args.scenario}: {exc}") from exc
    if args.seed is not None:
        sc.seed = args.seed
    if args.trials is not None:
        if args.trials < 2:
            raise DataError("--trials must be at least 2")
        sc.trials = args.trials
    if args.eps_guess is not None:
        sc.ereff_guess = args.eps_guess
    return sc


def cmd_mc(args):
    sc = _scenario(args)
    ds = mc.synthesize_dataset(sc)
    try:
        res = mc.run_mc(sc, ds=ds)
    except mc.McFailure as exc:
        raise NumericError(str(exc)) from exc
    _, lin = mc.linear_prediction(sc, ds=ds, threads=args.threads)
    cmp = mc.compare_linear_vs_mc(res.std, lin, sc.frequencies)
    os.makedirs(args.out, exist_ok=True)
    m, s = res.mean, res.std
    with open(os.path.join(args.out, "mc_vs_linear.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "frequency_hz", "mc_mean", "mc_std", "linear_std", "rel_error"])
        for q in mc.QUANTITIES:
            for i, f in enumerate(sc.frequencies):
                e = cmp.rel_error[q][i]
                w.writerow([q, _fmt(f), _fmt(m[q][i]), _fmt(s[q][i]), _fmt(lin[q][i]),
                            _fmt(e) if np.isfinite(e) else "nan"])
    rows = [(q, f, m[q][i], s[q][i]) for q in mc.QUANTITIES for i, f in enumerate(sc.frequencies)]
    write_table(os.path.join(args.out, "mc_stats.csv"), rows)
    doc = {"mc": res.to_dict(), "comparison": cmp.to_dict(),
           "linear_std": {q: [float(x) for x in lin[q]] for q in mc.QUANTITIES},
           "scenario": sc.to_dict()}
    _dump_json(doc, os.path.join(args.out, "mc.json"))
    for q in mc.QUANTITIES:
        print(f"{q:15s} mean relative std gap {cmp.summary[q]:.2%}")
    return 0


def cmd_synth(args):
    sc = _scenario(args)
    ds = mc.synthesize_dataset(sc)
    out = args.out
    os.makedirs(out, exist_ok=True)
    names = sc.names
    noise = sc.noise_blocks()
    lines = []
    for nm, rec, l in zip(names, ds.lines, sc.lengths):
        nw.write_touchstone(rec, os.path.join(out, f"{nm}.s2p"), comments=[f"synthetic line {nm}"])
        nw.write_covariance_json(os.path.join(out, f"{nm}_cov.json"), nm, sc.frequencies, noise[nm])
        lines.append({"name": nm, "path": f"{nm}.s2p", "length_m": float(l), "noise_cov": f"{nm}_cov.json"})
    nw.write_touchstone(ds.reflect, os.path.join(out, "reflect.s2p"), comments=["synthetic reflect"])
    nw.write_covariance_json(os.path.join(out, "reflect_cov.json"), "reflect", sc.frequencies, noise["reflect"])
    nw.write_touchstone(ds.dut, os.path.join(out, "dut.s2p"), comments=["synthetic DUT (raw)"])
    nw.write_covariance_json(os.path.join(out, "dut_cov.json"), "dut", sc.frequencies, noise["dut"])
    sc.geometry.to_json(os.path.join(out, "geometry.json"))
    recipe = {
        "lines": lines, "thru": sc.thru,
        "reflect": {"path": "reflect.s2p", "estimate": _c2l(sc.reflect_estimate),
                    "offset_std": sc.reflect_offset_std, "noise_cov": "reflect_cov.json"},
        "ereff_guess": sc.ereff_guess, "length_std": sc.length_std,
        "dut": {"path": "dut.s2p", "noise_cov": "dut_cov.json"},
    }
    if sc.mismatch:
        recipe["mismatch"] = {"geometry": "geometry.json"}
    _dump_json(recipe, os.path.join(out, "recipe.json"))
    return 0


def cmd_cov(args):
    src = args.sweeps
    if not src or not os.path.isdir(src):
        raise DataError(f"sweep directory not found: {src}")
    files = sorted(glob.glob(os.path.join(src, "*.s2p")) + glob.glob(os.path.join(src, "*.json")))
    if len(files) < 2:
        raise DataError(f"{src}: at least two sweep files are required")
    try:
        sweeps = [nw.read_sweep(p) for p in files]
        cov, mean = nw.sample_covariance(sweeps)
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from exc
    out = args.out
    if not out.endswith(".json"):
        os.makedirs(out, exist_ok=True)
        out = os.path.join(out, "covariance.json")
    std_id = args.standard_id or os.path.basename(os.path.normpath(src))
    nw.write_covariance_json(out, std_id, mean.frequencies, cov, n_samples=len(sweeps))
    nw.write_touchstone(mean, os.path.splitext(out)[0] + "_mean.s2p", comments=[f"mean of {len(sweeps)} sweeps"])
    return 0


COMMANDS = {"calibrate": cmd_calibrate, "apply": cmd_apply, "uncert": cmd_uncert,
            "mc": cmd_mc, "synth": cmd_synth, "cov": cmd_cov}


def build_parser():
    p = argparse.ArgumentParser(prog="mtrl-unc", description="Multiline TRL calibration with uncertainty propagation")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--recipe", help="calibration recipe JSON (calibrate, uncert)")
    p.add_argument("--scenario", help="Monte-Carlo scenario JSON (mc, synth); defaults to the built-in scenario")
    p.add_argument("--out", required=True, help="output directory (or file for cov)")
    p.add_argument("--seed", type=int, help="RNG seed override")
    p.add_argument("--trials", type=int, help="Monte-Carlo trial count override")
    p.add_argument("--eps-guess", type=float, help="effective-permittivity guess for the first frequency")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads (default: all cores)")
    p.add_argument("--fail-threshold", type=float, default=0.0,
                   help="maximum tolerated fraction of flagged frequencies (default 0)")
    p.add_argument("--solution", help="solution.json from calibrate (apply)")
    p.add_argument("--dut", help="raw DUT sweep (apply)")
    p.add_argument("--dut-cov", help="DUT noise covariance file (apply)")
    p.add_argument("--sweeps", help="directory of repeated sweeps (cov)")
    p.add_argument("--standard-id", help="standard id written into the covariance file (cov)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _validate(args):
    if args.eps_guess is not None and not args.eps_guess >= 1:
        raise DataError("--eps-guess must be >= 1")
    if args.threads < 1:
        raise DataError("--threads must be >= 1")
    if not 0 <= args.fail_threshold <= 1:
        raise DataError("--fail-threshold must be within [0, 1]")
    if args.command in ("calibrate", "uncert") and not args.recipe:
        raise DataError(f"{args.command} needs --recipe")
    for key in ("recipe", "scenario", "solution", "dut", "dut_cov"):
        v = getattr(args, key)
        if v and not os.path.exists(v):
            raise DataError(f"file not found: {v}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _validate(args)
        return COMMANDS[args.command](args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except nw.TouchstoneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, mtrl.CalibrationError, nk.SingularMatrixError, nk.DegenerateLineSet) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
