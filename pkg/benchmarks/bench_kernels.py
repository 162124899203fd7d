"""Timing of the batch kernels: numba build vs the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--points 3000] [--repeat 3]

The fallback runs in a subprocess with MTRL_UNC_NO_NUMBA=1 because the
backend is selected at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def workload(points, seed=0):
    from mtrl_unc import mc
    sc = mc.McScenario(frequencies=np.linspace(5e9, 150e9, 30), trials=max(2, points // 30), seed=seed)
    ds = mc.synthesize_dataset(sc)
    streams = mc.trial_streams(sc.seed, sc.trials)
    noise_sqrt = {nm: mc._sqrtm_psd(C) for nm, C in sc.noise_blocks().items()}
    draws = [mc.draw_trial(sc, ds, s, noise_sqrt) for s in streams]
    N = len(sc.lengths)
    Ms = np.ascontiguousarray(np.concatenate([d[0] for d in draws]).reshape(-1, N, 2, 2))
    ga = np.ascontiguousarray(np.concatenate([d[1] for d in draws]))
    gb = np.ascontiguousarray(np.concatenate([d[2] for d in draws]))
    md = np.ascontiguousarray(np.concatenate([d[3] for d in draws]).reshape(-1, 2, 2))
    ge = np.ascontiguousarray(np.tile(ds.gamma.astype(complex), sc.trials))
    return sc, Ms, ga, gb, md, ge


def run(points, repeat):
    from mtrl_unc import _jit
    from mtrl_unc import kernels as K
    sc, Ms, ga, gb, md, ge = workload(points)
    args = (Ms, sc.lineset.dl, sc.thru, ga, gb, sc.reflect_estimate, ge, 1.0 + 0j)
    t0 = time.perf_counter()
    p, _ = K.solve_batch(*args)
    K.apply_batch(p, md)
    first = time.perf_counter() - t0
    ts, ta = [], []
    for _ in range(repeat):
        t0 = time.perf_counter()
        p, st = K.solve_batch(*args)
        t1 = time.perf_counter()
        K.apply_batch(p, md)
        ts.append(t1 - t0)
        ta.append(time.perf_counter() - t1)
    return {"backend": _jit.backend(), "points": int(Ms.shape[0]), "first_call_s": first,
            "solve_batch_s": min(ts), "apply_batch_s": min(ta), "valid": int(K.is_valid(st).sum())}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=3000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    a = ap.parse_args(argv)
    if a.child:
        print(json.dumps(run(a.points, a.repeat)))
        return 0
    rows = []
    for flag in ("", "1"):
        env = dict(os.environ)
        env.pop("MTRL_UNC_NO_NUMBA", None)
        if flag:
            env["MTRL_UNC_NO_NUMBA"] = flag
        out = subprocess.run([sys.executable, __file__, "--child", "--points", str(a.points),
                              "--repeat", str(a.repeat)], env=env, check=True, capture_output=True, text=True)
        rows.append(json.loads(out.stdout.strip().splitlines()[-1]))
    print(f"{'backend':<8} {'points':>7} {'first call':>11} {'solve_batch':>12} {'apply_batch':>12} {'pts/s':>10}")
    for r in rows:
        print(f"{r['backend']:<8} {r['points']:>7} {r['first_call_s']:>10.2f}s {r['solve_batch_s']:>11.4f}s "
              f"{r['apply_batch_s']:>11.4f}s {r['points'] / r['solve_batch_s']:>10.0f}")
    if len(rows) == 2 and rows[0]["backend"] != rows[1]["backend"]:
        print(f"speed-up (solve_batch): {rows[1]['solve_batch_s'] / rows[0]['solve_batch_s']:.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
