"""Smoke test for the gcskel Python extension.

Uses an installed `gcskel` module if there is one (e.g. after
`maturin develop -m crates/py/Cargo.toml`); otherwise builds the extension
with cargo and imports it from a temporary directory.
"""

import importlib
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        return importlib.import_module("gcskel")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "gcskel-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = {"darwin": "libgcskel.dylib", "win32": "gcskel.dll"}.get(sys.platform, "libgcskel.so")
    built = ROOT / "target" / "release" / lib
    tmp = Path(tempfile.mkdtemp(prefix="gcskel-"))
    suffix = ".pyd" if sys.platform == "win32" else sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    shutil.copy(built, tmp / f"gcskel{suffix}")
    sys.path.insert(0, str(tmp))
    return importlib.import_module("gcskel")


def main():
    gcskel = load_module()

    cloud = gcskel.fixture("cylinder", 2000)
    print(cloud)
    assert cloud.has_normals and len(cloud) > 1500

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "cylinder.ply"
        cloud.save(str(path))
        assert len(gcskel.PointCloud.load(str(path))) == len(cloud)

        config = gcskel.Config(clusters=30, k1="auto", k2=5.0, seed=7)
        run = gcskel.run_pipeline(str(path), str(Path(tmp) / "out"), config)
        skeleton = run.skeleton
        print(f"{run.n_candidates} candidates, selected {run.selected_ids} at k1={run.k1}%: {skeleton}")
        assert skeleton.is_connected() and len(skeleton.leaves()) == 2
        for name in ("manifest.json", "parts.json", "selection.json", "skeleton.json", "skeleton.obj"):
            assert (Path(tmp) / "out" / name).exists(), name

    tube = gcskel.fixture("cylinder", 800)
    reg = gcskel.register(tube, tube)
    print(f"self-registration: scale {reg.scale:.4f}, {reg.iterations} iterations")
    assert abs(reg.scale - 1.0) < 1e-2

    csv = gcskel.synth_trials(3, "random", "both", 1)
    assert len(csv.strip().splitlines()) == 1 + 2 * 3

    try:
        gcskel.Config(k2=400.0)
    except ValueError as e:
        print(f"rejected bad config: {e}")
    else:
        raise AssertionError("k2 = 400 should be rejected")

    print("smoke test passed")


if __name__ == "__main__":
    main()
