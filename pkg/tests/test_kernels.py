import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from conftest import make_point
from mtrl_unc import _jit
from mtrl_unc import kernels as K

SCRIPT = textwrap.dedent("""
    import sys
    import numpy as np
    from mtrl_unc import kernels as K, _jit
    d = np.load(sys.argv[1])
    p, st = K.solve_batch(d["Ms"], d["dl"], 0, d["ga"], d["gb"], 1.0 + 0j, d["ge"], 1.0 + 0j)
    T = K.apply_batch(p, d["Md"])
    np.savez(sys.argv[2], p=p, st=st, T=T, backend=_jit.backend())
""")


def batch(seed=0, K_=40, N=4):
    rng = np.random.default_rng(seed)
    lengths = np.array([0, 0.3e-3, 1.1e-3, 2.6e-3])[:N]
    pts = [make_point(rng, N=N, f=rng.uniform(5e9, 100e9), lengths=lengths) for _ in range(K_)]
    return dict(Ms=np.ascontiguousarray(np.stack([p["Ms"] for p in pts])), dl=lengths,
                ga=np.array([p["ga"] for p in pts]), gb=np.array([p["gb"] for p in pts]),
                ge=np.array([p["gamma"] * 1.02 for p in pts]), Md=np.stack([p["Mdut"] for p in pts]),
                dut=np.stack([p["dut"] for p in pts]))


def test_numpy_fallback_matches_default_backend(tmp_path):
    d = batch()
    np.savez(tmp_path / "in.npz", **{k: v for k, v in d.items() if k != "dut"})
    env = dict(os.environ, MTRL_UNC_NO_NUMBA="1")
    subprocess.run([sys.executable, "-c", SCRIPT, str(tmp_path / "in.npz"), str(tmp_path / "out.npz")],
                   check=True, env=env)
    ref = np.load(tmp_path / "out.npz")
    assert str(ref["backend"]) == "numpy"
    p, st = K.solve_batch(d["Ms"], d["dl"], 0, d["ga"], d["gb"], 1.0 + 0j, d["ge"], 1.0 + 0j)
    assert np.array_equal(st, ref["st"])
    assert np.max(np.abs(p - ref["p"]) / np.maximum(np.abs(ref["p"]), 1)) < 1e-12
    T = K.apply_batch(p, d["Md"])
    assert np.max(np.abs(T - ref["T"]) / np.abs(ref["T"]).max()) < 1e-12


def test_batch_recovers_dut():
    d = batch(seed=1)
    p, st = K.solve_batch(d["Ms"], d["dl"], 0, d["ga"], d["gb"], 1.0 + 0j, d["ge"], 1.0 + 0j)
    assert np.all(K.is_valid(st))
    S = K.t2s_batch(K.apply_batch(p, d["Md"]))
    assert np.max(np.abs(S - d["dut"])) < 1e-9


def test_s2t_batch_round_trip(rng):
    S = rng.normal(size=(20, 2, 2)) + 1j * rng.normal(size=(20, 2, 2)) + np.array([[0, 0], [1, 0]])
    assert np.max(np.abs(K.t2s_batch(K.s2t_batch(S)) - S)) < 1e-12


@pytest.mark.skipif(not _jit.HAVE_NUMBA, reason="numba not installed")
def test_python_source_kept_for_compiled_kernels():
    assert callable(K.solve_point.py_func)


def test_status_descriptions():
    assert K.describe_status(0) == []
    text = K.describe_status(K.ST_NO_LAMBDA | K.ST_UNWRAP)
    assert len(text) == 2
    assert not K.is_valid(K.ST_UNWRAP) and K.is_valid(K.ST_SIGN_FALLBACK | K.ST_GAMMA_SWAPPED)
