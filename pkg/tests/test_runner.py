import math

import numpy as np
import pytest

from alevem.analysis import ErrorReport
from alevem.ale_forms import interpolate_ale_map
from alevem.mesh import PolygonalMesh, generate_cvt, save_mesh
from alevem.presets import zero_velocity
from alevem.runner import (
    ConfigError,
    ExperimentConfig,
    emit_tables,
    export_snapshot,
    git_blob_hash,
    level_meshes,
    parse_config,
    run_experiment,
)
from alevem.vem_core import VemSpace

TINY = dict(k=1, mesh_levels=2, base_cells=20, lloyd_iterations=20, T=2e-3)


def test_parse_config_types():
    cfg = parse_config(
        "[experiment]\nexperiment = oscillating\nk = 2\ntheta = 1\nT = 0.005\ndt0 = 2e-4\n"
        "mesh_levels = 3\nexport_snapshots = yes\nsnapshot_times = 0.001, 0.004\n"
    )
    assert cfg.k == 2 and cfg.theta == 1.0 and cfg.T == 0.005 and cfg.dt0 == 2e-4
    assert cfg.mesh_levels == 3
    assert cfg.export_snapshots and cfg.snapshot_times == [0.001, 0.004]


def test_parse_config_mesh_files():
    cfg = parse_config("[experiment]\nexperiment = ce_static\nk = 1\nmesh_levels = a.txt, b.txt\n")
    assert cfg.mesh_levels == ["a.txt", "b.txt"]


@pytest.mark.parametrize(
    "text",
    [
        "experiment = ce_static\n",
        "[experiment]\nk = 1\n",
        "[experiment]\nexperiment = ce_static\nk = 4\n",
        "[experiment]\nexperiment = ce_static\nk = one\n",
        "[experiment]\nexperiment = ce_static\nk = 1\ntheta = 2\n",
        "[experiment]\nexperiment = ce_static\nk = 1\ncolour = red\n",
        "[experiment]\nexperiment = teleport\nk = 1\n",
        "[experiment]\nexperiment = custom\nk = 1\nmotion = vorticial\n",
        "[experiment]\nexperiment = ce_static\nk = 1\nT = -1\n",
        "[experiment]\nexperiment = ce_static\nk = 1\nmesh_levels = 0\n",
    ],
)
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_defaults():
    cfg = ExperimentConfig("pme_weak", 2)
    assert cfg.is_pme and cfg.time_step0 == 1e-4 and cfg.cells0 == 60
    cfg = ExperimentConfig("ce_linear", 1)
    assert not cfg.is_pme and cfg.time_step0 == 1e-3 and cfg.cells0 == 100
    assert "experiment = ce_linear" in cfg.echo()


def test_git_blob_hash_known_value():
    # `git hash-object` of an empty file and of "hello\n"
    assert git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_emit_tables_layout(tmp_path):
    reports = [ErrorReport(0.2, 10, l2=4e-2, h1=0.2), ErrorReport(0.1, 40, l2=1e-2, h1=0.1)]
    text = emit_tables(reports, tmp_path / "t.csv")
    lines = text.splitlines()
    assert lines[0] == "level,h,dofs,l2,h1,rate_l2,rate_h1"
    assert lines[1] == "0,2.000e-01,10,4.000e-02,2.000e-01,,"
    assert lines[2] == "1,1.000e-01,40,1.000e-02,1.000e-01,2.000e+00,1.000e+00"
    assert lines[3] == "fitted,,,,,2.000e+00,1.000e+00"
    assert (tmp_path / "t.csv").read_text() == text


def test_emit_tables_empty():
    with pytest.raises(ValueError):
        emit_tables([])


def _read_vtk(path):
    lines = path.read_text().splitlines()
    i = next(n for n, l in enumerate(lines) if l.startswith("POINTS"))
    npts = int(lines[i].split()[1])
    pts = np.array([[float(v) for v in l.split()] for l in lines[i + 1 : i + 1 + npts]])
    i += 1 + npts
    ncell = int(lines[i].split()[1])
    cells = [[int(v) for v in l.split()][1:] for l in lines[i + 1 : i + 1 + ncell]]
    i += 1 + ncell
    types = lines[i + 1 : i + 1 + ncell]
    j = lines.index("SCALARS rho double 1") + 2
    rho = np.array([float(v) for v in lines[j : j + npts]])
    j = lines.index("SCALARS rho_mean double 1") + 2
    mean = np.array([float(v) for v in lines[j : j + ncell]])
    return pts, cells, types, rho, mean


def test_snapshot_round_trip(tmp_path, cvt100):
    space = VemSpace(cvt100, 2)
    ale = interpolate_ale_map(lambda xi, t: np.column_stack([2 * xi[:, 0], xi[:, 1] + 0.1]), zero_velocity, space, 0.0)
    rho = ale.interpolate_physical(lambda x: x[:, 0] + 3 * x[:, 1])
    path = tmp_path / "s.vtk"
    export_snapshot(rho, ale, space, path)
    pts, cells, types, vals, mean = _read_vtk(path)
    nv = cvt100.n_vertices
    np.testing.assert_array_equal(pts[:, :2], ale.map_dofs[:nv])
    assert all(np.array_equal(a, b) for a, b in zip(cells, cvt100.elements))
    assert set(types) == {"7"}
    np.testing.assert_array_equal(vals, rho[:nv])
    # the cell mean of a linear field is its value at the physical centroid
    for e in range(0, cvt100.n_elements, 9):
        v = cvt100.vertices[cvt100.elements[e]]
        x = np.column_stack([2 * v[:, 0], v[:, 1] + 0.1])
        a = x[:, 0] * np.roll(x[:, 1], -1) - np.roll(x[:, 0], -1) * x[:, 1]
        cx = ((x[:, 0] + np.roll(x[:, 0], -1)) * a).sum() / (3 * a.sum())
        cy = ((x[:, 1] + np.roll(x[:, 1], -1)) * a).sum() / (3 * a.sum())
        assert mean[e] == pytest.approx(cx + 3 * cy, rel=1e-12)


def test_level_meshes_cached(tmp_path):
    cfg = ExperimentConfig("ce_static", output_dir=str(tmp_path), **TINY)
    first = level_meshes(cfg)
    files = sorted(p.name for p in (tmp_path / "meshes").iterdir())
    assert files == ["cvt_square_n20_seed0_lloyd20.txt", "cvt_square_n80_seed0_lloyd20.txt"]
    again = level_meshes(cfg)
    assert [d for _, _, d in first] == [d for _, _, d in again]
    assert [m.n_elements for m, _, _ in first] == [20, 80]


def test_run_experiment_outputs(tmp_path):
    cfg = ExperimentConfig("ce_static", output_dir=str(tmp_path / "out"), **TINY)
    out = run_experiment(cfg, mesh_dir=tmp_path / "m")
    assert not out.failed_levels
    assert out.forcing_error is not None and out.forcing_error < 1e-6
    rows = out.csv_path.read_text().splitlines()
    assert rows[0] == "level,h,dofs,l2,h1,rate_l2,rate_h1"
    assert len(rows) == 4
    manifest = out.manifest_path.read_text()
    for key in ("[config]", "[inputs]", "config_hash", "mesh_0", "[checks]", "forcing_check", "level_1 = ok"):
        assert key in manifest
    r = out.table.rows
    assert r[1].l2 < r[0].l2 and r[1].steps > r[0].steps


def test_runs_are_byte_identical(tmp_path):
    texts = []
    for name in ("a", "b"):
        cfg = ExperimentConfig("oscillating", output_dir=str(tmp_path / name), **TINY)
        texts.append(run_experiment(cfg, mesh_dir=tmp_path / "m").csv_path.read_bytes())
    assert texts[0] == texts[1]


def test_failed_level_is_recorded(tmp_path):
    # a 3x3 square folds under the CE map, so the second level cannot run
    good = generate_cvt(20, lloyd_iterations=10)
    save_mesh(good, tmp_path / "good.txt")
    small = generate_cvt(30, lloyd_iterations=10)
    save_mesh(PolygonalMesh(3.0 * small.vertices, small.elements), tmp_path / "big.txt")
    cfg = ExperimentConfig(
        "ce_static", 1, T=1e-3, mesh_levels=[str(tmp_path / "good.txt"), str(tmp_path / "big.txt")],
        output_dir=str(tmp_path / "out"),
    )
    out = run_experiment(cfg)
    assert [lv.index for lv in out.failed_levels] == [1]
    assert "DegenerateMapError" in out.failed_levels[0].error
    assert "level_1 = FAILED" in out.manifest_path.read_text()
    assert len(out.table.rows) == 1


def test_snapshots_written(tmp_path):
    cfg = ExperimentConfig(
        "oscillating", output_dir=str(tmp_path), export_snapshots=True, snapshot_times=[0.001, 0.002], **TINY
    )
    run_experiment(cfg, mesh_dir=tmp_path / "m")
    names = sorted(p.name for p in tmp_path.glob("*.vtk"))
    assert names == [f"snapshot_L{l}_t{t}.vtk" for l in (0, 1) for t in ("0.001", "0.002")]
    # oscillating map: y extent is [A sin(pi u_y t), 1 + A sin(pi u_y t)]
    pts, *_ = _read_vtk(tmp_path / "snapshot_L1_t0.002.vtk")
    shift = 0.1 * math.sin(math.pi * 20 * 0.002)
    assert pts[:, 1].min() == pytest.approx(shift, abs=1e-12)
    assert pts[:, 0].max() == pytest.approx(2.0, abs=1e-12)


def test_pme_level_run(tmp_path):
    cfg = ExperimentConfig("pme_weak", 1, T=5e-4, mesh_levels=1, base_cells=30, lloyd_iterations=10,
                           output_dir=str(tmp_path))
    out = run_experiment(cfg)
    assert out.forcing_error is None
    assert out.csv_path.read_text().splitlines()[0] == "level,h,dofs,l1_sol,l1_mesh,rate_l1_sol,rate_l1_mesh"
    assert "forcing_check = skipped" in out.manifest_path.read_text()


def test_emit_tables_single_level():
    lines = emit_tables([ErrorReport(0.1, 40, l2=1e-2, h1=0.1)]).splitlines()
    assert lines[0] == "level,h,dofs,l2,h1,rate_l2,rate_h1"
    assert lines[1] == "0,1.000e-01,40,1.000e-02,1.000e-01,,"
    assert lines[2] == "fitted,,,,,,"


def test_emit_tables_round_trip_through_rates():
    # four levels of a convergence table; rates recomputed from the printed
    # columns agree with the printed rate columns
    from alevem.analysis import EocTable, eoc

    reports = [
        ErrorReport(0.1041, 200, l2=2.604e-3, h1=9.1e-2),
        ErrorReport(0.0480, 800, l2=5.82e-4, h1=4.3e-2),
        ErrorReport(0.0231, 3200, l2=1.36e-4, h1=2.1e-2),
        ErrorReport(0.0113, 12800, l2=3.2e-5, h1=1.0e-2),
    ]
    rows = [l.split(",") for l in emit_tables(reports).splitlines()[1:-1]]
    back = EocTable([ErrorReport(float(r[1]), int(r[2]), l2=float(r[3]), h1=float(r[4])) for r in rows])
    eoc(back)
    for i, r in enumerate(rows[1:]):
        assert float(r[5]) == pytest.approx(back.rates["l2"][i], rel=2e-3)
        assert float(r[6]) == pytest.approx(back.rates["h1"][i], rel=2e-3)


def test_snapshot_of_constant_on_identity(tmp_path, cvt100):
    from alevem.ale_forms import identity_map

    space = VemSpace(cvt100, 2)
    rho = space.interpolate(lambda x: np.ones(len(x)))
    export_snapshot(rho, identity_map(space), space, tmp_path / "c.vtk")
    _, _, _, vals, mean = _read_vtk(tmp_path / "c.vtk")
    np.testing.assert_allclose(vals, 1.0, rtol=0, atol=1e-14)
    np.testing.assert_allclose(mean, 1.0, rtol=0, atol=1e-13)


def test_snapshot_read_by_meshio(tmp_path, cvt100):
    meshio = pytest.importorskip("meshio")
    space = VemSpace(cvt100, 1)
    ale = interpolate_ale_map(lambda xi, t: np.column_stack([xi[:, 0] + 0.2 * xi[:, 1], xi[:, 1]]), zero_velocity,
                              space, 0.0)
    rho = ale.interpolate_physical(lambda x: x[:, 0] * x[:, 1])
    export_snapshot(rho, ale, space, tmp_path / "s.vtk")
    m = meshio.read(tmp_path / "s.vtk")
    np.testing.assert_array_equal(m.points[:, :2], ale.map_dofs[: cvt100.n_vertices])
    np.testing.assert_array_equal(m.point_data["rho"].ravel(), rho[: cvt100.n_vertices])
    # meshio drops cell data of polygon files, so only connectivity is compared
    polys = [list(c) for block in m.cells for c in block.data]
    assert polys == [list(e) for e in cvt100.elements]
