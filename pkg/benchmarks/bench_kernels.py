"""Compare the compiled kernels with the pure Python fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--levels 8 11 14] [--repeat 3]

Both backends are loaded directly, so the comparison does not depend on
``STAFEM_PURE_PYTHON``.  Results are checked for agreement before timing.
"""

import argparse
import time

import numpy as np

from stafem import _pykernels
from stafem.fespace import FeSpace, assemble
from stafem.mesh import refine, refine_uniform, square_mesh

try:
    from stafem import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _graded_mesh(level):
    # uniform base plus a corner-refined patch so the forest has depth
    mesh = refine_uniform(square_mesh(), level)
    for _ in range(4):
        c = mesh.points[mesh.cells].mean(axis=1)
        mesh = refine(mesh, mesh.leaves[(c ** 2).sum(axis=1) < 0.05])
    return mesh


def bench_pcg(mesh, repeat):
    space = FeSpace(mesh)
    K, M = assemble(mesh).restricted(space)
    a = (M + 1e-3 * K).tocsr()
    a.sort_indices()
    b = np.random.default_rng(0).standard_normal(a.shape[0])
    x0 = np.zeros_like(b)
    args = (a.indptr, a.indices, a.data, b, x0, 1e-10, 10 * len(b))
    out = {}
    for name, mod in (("python", _pykernels), ("compiled", _ckernels)):
        if mod is None:
            continue
        x, its, ok = mod.pcg_jacobi(*args)
        assert ok, f"{name} pcg failed"
        out[name] = (_best_of(lambda: mod.pcg_jacobi(*args), repeat), x)
    return len(b), out


def bench_locate(mesh, repeat, n_points=20000):
    f = mesh.forest
    pts = np.random.default_rng(1).random((n_points, 2))
    is_leaf = f.leaf_mask(mesh.leaves).astype(np.uint8)
    args = (pts, f.coords, f.verts, f.children, f.n_roots, is_leaf)
    out = {}
    for name, mod in (("python", _pykernels), ("compiled", _ckernels)):
        if mod is None:
            continue
        elem, _ = mod.locate_points(*args)
        out[name] = (_best_of(lambda: mod.locate_points(*args), repeat), elem)
    return n_points, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--levels", type=int, nargs="+", default=[8, 11, 14])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not available; timing the fallback only")
    print(f"{'kernel':<14}{'level':>6}{'size':>9}{'python [s]':>12}{'compiled [s]':>14}{'speedup':>9}")
    for level in args.levels:
        mesh = _graded_mesh(level)
        for kernel, fn in (("pcg_jacobi", bench_pcg), ("locate_points", bench_locate)):
            size, out = fn(mesh, args.repeat)
            tp = out["python"][0]
            if "compiled" in out:
                tc = out["compiled"][0]
                ref, new = out["python"][1], out["compiled"][1]
                if kernel == "pcg_jacobi":
                    assert np.allclose(ref, new, rtol=1e-7, atol=1e-9), "backends disagree"
                else:
                    assert np.array_equal(ref, new), "backends disagree"
                print(f"{kernel:<14}{level:>6}{size:>9}{tp:>12.4f}{tc:>14.4f}{tp / tc:>9.1f}")
            else:
                print(f"{kernel:<14}{level:>6}{size:>9}{tp:>12.4f}{'-':>14}{'-':>9}")


if __name__ == "__main__":
    main()
