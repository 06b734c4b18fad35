use pyo3::ffi::c_str;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &std::ffi::CStr) {
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(gcskel::gcskel)(py);
        py.import("sys")
            .unwrap()
            .getattr("modules")
            .unwrap()
            .set_item("gcskel", module)
            .unwrap();
        let globals = PyDict::new(py);
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed: {e}");
        }
    });
}

#[test]
fn clouds_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.xyzn");
    let code = format!(
        r#"
import gcskel
c = gcskel.PointCloud([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 0, 1]] * 3)
assert len(c) == 3 and c.has_normals
c.save({path:?})
d = gcskel.PointCloud.load({path:?})
assert d.positions() == c.positions()
assert d.normals() == c.normals()
assert gcskel.PointCloud([[0, 0, 0]]).normals() is None
"#
    );
    with_module(&std::ffi::CString::new(code).unwrap());
}

#[test]
fn errors_map_to_python_exceptions() {
    with_module(c_str!(
        r#"
import gcskel
for bad in (lambda: gcskel.fixture("teapot"),
            lambda: gcskel.Config(k1="most"),
            lambda: gcskel.Config(k2=250.0),
            lambda: gcskel.PointCloud([[0, 0, 0]], [[0, 0, 1], [1, 0, 0]])):
    try:
        bad()
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")
try:
    gcskel.PointCloud.load("/nonexistent/cloud.xyz")
except OSError:
    pass
else:
    raise AssertionError("expected OSError")
"#
    ));
}

#[test]
fn pipeline_runs_from_python() {
    with_module(c_str!(
        r#"
import gcskel
cloud = gcskel.fixture("cylinder", 1500)
cfg = gcskel.Config(clusters=20, k1="auto")
run = gcskel.run(cloud, cfg)
assert run.n_candidates > 0
assert len(run.selected_ids) == 1, run.selected_ids
skel = run.skeleton
assert skel.is_connected() and len(skel.leaves()) == 2
assert all(a < len(skel.vertices) and b < len(skel.vertices) for a, b in skel.edges)
axes = dict(run.part_axes())
assert run.selected_ids[0] in axes
assert len(run.part_members(run.selected_ids[0])) > 0
assert skel.to_obj().startswith("v ") or "\nv " in skel.to_obj()
"#
    ));
}

#[test]
fn registration_and_trials_from_python() {
    with_module(c_str!(
        r#"
import gcskel, math
pts = [[math.cos(t) * (2 + 0.3 * math.sin(3 * t)), math.sin(t), 0.1 * t] for t in [k * 0.2 for k in range(40)]]
nrm = [[0, 0, 1]] * len(pts)
x = gcskel.PointCloud(pts, nrm)
reg = gcskel.register(x, x)
assert abs(reg.scale - 1) < 1e-3, reg.scale
assert max(abs(reg.rotation[i][j] - (i == j)) for i in range(3) for j in range(3)) < 1e-3
h = reg.nll_history
assert all(b <= a + 1e-7 for a, b in zip(h, h[1:]))
csv = gcskel.synth_trials(2, "regular", "on", 3)
assert csv.splitlines()[0] == "trial,sampling,normals,rot_err,plane_err_deg,reg_cost_deg,scale_err"
assert len(csv.splitlines()) == 3
"#
    ));
}
