import json

import numpy as np
import pytest
from PIL import Image

from krflow.models import CheckResult, DiagnosticRow, EstimateReport, FlowState, HolderFit, ScalarField, TorusGrid
from krflow.services.artifact_service import ArtifactService


@pytest.fixture
def grid():
    return TorusGrid(64)


@pytest.fixture
def artifact_service(tmp_path):
    return ArtifactService(str(tmp_path / "out"), "a" * 64, seed=7)


def make_state(grid, t, level=4):
    x, y = grid.coords()
    phi = ScalarField(grid, 1e-3 * np.cos(2.0 * np.pi * x) * t)
    u = ScalarField(grid, 1e-2 * np.sin(2.0 * np.pi * y))
    return FlowState(t=t, phi=phi, u=u, level=level)


def make_row(t):
    return DiagnosticRow(t=t, level=4, phi_min=-1.0, phi_max=1.0, area_error=1e-15, mass=-0.1,
                         lp_integral=1.2, b_plus=0.3, b_minus=0.4, time_concavity=None, gradient_ratio=2.0)


def test_field_round_trip(artifact_service, grid):
    """Test KRF1 header and float64 blocks read back unchanged"""
    blocks = [np.random.default_rng(1).normal(size=(64, 64)) for _ in range(2)]
    path = artifact_service.write_field("field.krf", "test", 0.1, blocks)
    assert path.read_bytes().startswith(b"KRF1 test 64 0.1 hash=" + b"a" * 64 + b"\n")
    kind, n, t, read, stamp = ArtifactService.read_field(path)
    assert (kind, n, t, stamp) == ("test", 64, 0.1, "a" * 64)
    for original, loaded in zip(blocks, read):
        np.testing.assert_array_equal(original, loaded)


def test_field_rejects_bad_magic(tmp_path):
    """Test files without the KRF1 magic are rejected"""
    path = tmp_path / "bad.krf"
    path.write_bytes(b"KRF2 test 64 0.1\n" + bytes(64 * 64 * 8))
    with pytest.raises(ValueError, match="not a KRF1 file"):
        ArtifactService.read_field(path)


def test_field_rejects_truncated_payload(tmp_path):
    """Test partial blocks are rejected"""
    path = tmp_path / "short.krf"
    path.write_bytes(b"KRF1 test 64 0.1\n" + bytes(100 * 8))
    with pytest.raises(ValueError, match="whole number"):
        ArtifactService.read_field(path)


def test_checkpoints_and_lookup(artifact_service, grid):
    """Test checkpoints load in time order and unknown times list the ladder"""
    for index, t in enumerate([0.25, 0.5, 1.0]):
        artifact_service.write_checkpoint(index, make_state(grid, t, level=4 + index))
    states = artifact_service.load_checkpoints()
    assert [s.t for s in states] == [0.25, 0.5, 1.0]
    assert [s.level for s in states] == [4, 5, 6]
    found = artifact_service.checkpoint_at(0.5)
    np.testing.assert_array_equal(found.phi.values, make_state(grid, 0.5).phi.values)
    with pytest.raises(ValueError, match="available"):
        artifact_service.checkpoint_at(0.3)


def test_checkpoint_lookup_without_run(artifact_service):
    """Test an empty directory asks for the run subcommand"""
    with pytest.raises(FileNotFoundError, match="run"):
        artifact_service.checkpoint_at(0.5)


def test_diagnostics_csv_carries_hash(artifact_service):
    """Test tables start with the config hash line and the column header"""
    path = artifact_service.write_diagnostics([make_row(0.5), make_row(1.0)])
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=" + "a" * 64
    assert lines[1].startswith("t,level,phi_min,phi_max")
    stamp, rows = ArtifactService.read_csv(path)
    assert stamp == "a" * 64
    assert [float(r["t"]) for r in rows] == [0.5, 1.0]
    assert rows[0]["time_concavity"] == ""


def test_holder_rows_append(artifact_service):
    """Test holder.csv grows by one row per fit"""
    fit = HolderFit(exponent=0.6, constant=1.3, residual=0.01, direction="upper", pairs=40)
    artifact_service.append_holder("first", fit)
    path = artifact_service.append_holder("second", fit.model_copy(update={"slope": 0.62}))
    _, rows = ArtifactService.read_csv(path)
    assert [r["label"] for r in rows] == ["first", "second"]
    assert [r["slope"] for r in rows] == ["", "0.62"]


def test_report_round_trip(artifact_service):
    """Test report.csv reads back into an equivalent report"""
    report = EstimateReport(scenario="reference", checks=[
        CheckResult(check_id="area_conservation", scenario="reference", verdict="pass",
                    value=1e-13, tolerance=1e-8, provenance="exact"),
        CheckResult(check_id="gradient_bound", scenario="reference", verdict="fail",
                    value=3.0, tolerance=2.0, provenance="fitted", optional=True, detail="drift 3.000"),
    ])
    artifact_service.write_report(report)
    loaded = artifact_service.read_report()
    assert loaded.checks == report.checks
    assert loaded.passed()
    assert not loaded.passed(strict=True)


def test_mixed_provenance_is_refused(tmp_path, grid):
    """Test a second config may not write into the same directory without force"""
    directory = str(tmp_path / "shared")
    first = ArtifactService(directory, "a" * 64, seed=1)
    first.write_diagnostics([make_row(1.0)])
    with pytest.raises(ValueError, match="mixed provenance"):
        ArtifactService(directory, "b" * 64, seed=1)
    replaced = ArtifactService(directory, "b" * 64, seed=1, force=True)
    assert not (tmp_path / "shared" / "diagnostics.csv").exists()
    replaced.write_heatmap("u.pgm", np.zeros((64, 64)))
    manifest = json.loads((tmp_path / "shared" / "manifest.json").read_text())
    assert manifest["config_hash"] == "b" * 64
    assert manifest["files"] == ["u.pgm"]
    assert set(manifest["versions"]) == {"krflow", "numpy", "scipy"}


def test_heatmap_is_graymap(artifact_service, grid):
    """Test heatmaps are 8-bit graymaps with min black, max white and y up"""
    _, y = grid.coords()
    path = artifact_service.write_heatmap("ramp.pgm", y)
    assert path.read_bytes().startswith(b"P5")
    with Image.open(path) as image:
        assert image.mode == "L"
        assert image.size == (64, 64)
        pixels = np.asarray(image)
    assert pixels[-1, 0] == 0
    assert pixels[0, 0] == 255


if __name__ == "__main__":
    pytest.main([__file__])
