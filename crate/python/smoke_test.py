"""Smoke test for the Python bindings.

Build the extension first:

    cargo build --release -p gflownet-py --features extension-module

then run `python3 python/smoke_test.py`. The script copies the built shared
library next to a temporary package path and imports it.
"""

import glob
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

GRID = """
seed = 0
[env]
name = "hypergrid"
d = 2
side = 4
[optim]
iterations = 300
[eval]
every = 100
"""


def load_module():
    candidates = []
    for profile in ("release", "debug"):
        candidates += glob.glob(os.path.join(ROOT, "target", profile, "libgflownet_py.so"))
        candidates += glob.glob(os.path.join(ROOT, "target", profile, "libgflownet_py.dylib"))
    if not candidates:
        sys.exit("build the extension first: cargo build --release -p gflownet-py --features extension-module")
    tmp = tempfile.mkdtemp()
    shutil.copy(candidates[0], os.path.join(tmp, "gflownet_py.so"))
    sys.path.insert(0, tmp)
    import gflownet_py

    return gflownet_py


def main():
    gfn = load_module()

    assert gfn.count_dags(3) == 25
    assert gfn.count_trees(4) == 15
    assert abs(gfn.tv([0.5, 0.5], [1.0, 0.0]) - 0.5) < 1e-12
    assert gfn.jsd([0.3, 0.7], [0.3, 0.7]) == 0.0

    target = gfn.target_csv(GRID).strip().splitlines()
    assert len(target) == 1 + 16, len(target)

    out = tempfile.mkdtemp()
    res = gfn.train(GRID, out)
    assert [r["step"] for r in res["rows"]] == [100, 200, 300], res["rows"]
    assert all(r["tv"] is not None for r in res["rows"])
    row = gfn.evaluate(GRID, os.path.join(out, "checkpoint.json"))
    assert row["tv"] is not None

    try:
        gfn.train("seed = 0\n[env]\nname = \"nope\"\n")
    except ValueError as e:
        print("bad config rejected:", e)
    else:
        raise AssertionError("bad config accepted")

    print("final TV after 300 iterations: %.4f" % res["rows"][-1]["tv"])
    print("ok")


if __name__ == "__main__":
    main()
