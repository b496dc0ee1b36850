"""Smoke test for the compiled `highfield` Python module.

Build the extension first:

    cargo build --release -p highfield-py --features extension-module

The script copies the shared library next to a temporary `highfield.so` and
imports it, unless `highfield` is already importable.
"""

import importlib
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        return importlib.import_module("highfield")
    except ImportError:
        pass
    candidates = [os.environ.get("HIGHFIELD_LIB")] if os.environ.get("HIGHFIELD_LIB") else []
    for profile in ("release", "debug"):
        for name in ("libhighfield_py.so", "libhighfield_py.dylib", "highfield_py.dll"):
            candidates.append(str(ROOT / "target" / profile / name))
    lib = next((c for c in candidates if c and Path(c).exists()), None)
    if lib is None:
        sys.exit("highfield extension not found; build it with "
                 "`cargo build --release -p highfield-py --features extension-module`")
    target = Path(tempfile.mkdtemp()) / ("highfield.pyd" if lib.endswith(".dll") else "highfield.so")
    shutil.copy(lib, target)
    sys.path.insert(0, str(target.parent))
    return importlib.import_module("highfield")


def main():
    hf = load_module()

    model = hf.Model(1.0, 0.1)
    assert abs(model.beta - 0.5) < 1e-15
    grid = hf.Grid(6.0, 32)

    sp = hf.eigenpairs(model, grid, k=6, gap_tol=1e-2)
    mults = [m for _, m in sp.clusters()]
    print("eigenvalues:", ["%.6f" % v for v in sp.eigenvalues])
    print("multiplicities:", mults)
    assert mults[:3] == [1, 2, 3]
    assert abs(sp.eigenvalues[0] - 2.0) < 5e-3

    c = sp.coefficients(0)
    print("lambda1 = %.6f, lambda2 = %.6f" % (c["lambda1"][0], c["lambda2"][0]))
    assert abs(c["lambda1"][0] - math.sqrt(math.pi)) < 1e-2

    op = hf.fiber_operator(model, grid, p=1.0)
    chi = sp.eigenvector(0)
    assert op.dim == len(chi) == grid.dim

    small = hf.Grid(5.0, 16)
    table = hf.error_study(model, small, eps=[0.2, 0.1], times=[0.5], zgrid=(16.0, 64))
    print("errors:", table.errors, "unitarity defect: %.2e" % table.unitarity_defect)
    assert table.unitarity_defect < 1e-10

    r = hf.intertwiner([[1.0, 0.0, 0.0]], [[1.0, 0.2, 0.0]])
    assert r["unitarity_defect"] < 1e-12

    config = "[model]\nalpha = 1.0\nepsilon = 0.1\n[grid]\nhalf_width = 5.0\nn = 16\n[study]\nk = 4\n"
    with tempfile.TemporaryDirectory() as out:
        code, summary, failed, files = hf.run_scenario(config, "spectrum", out, seed=1)
        assert code == 0 and not failed, (code, failed)
        header, rows = hf.read_table(os.path.join(out, "spectrum.csv"))
        shape, is_complex, values = hf.read_field(os.path.join(out, "chi0.field"))
        assert shape == [16, 16] and not is_complex and len(values) == 256
        print("\n".join(summary))

    try:
        hf.Model(1.0, 2.0)
    except ValueError:
        pass
    else:
        raise AssertionError("epsilon above one was accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
