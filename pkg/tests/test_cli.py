import pytest

from main import EXIT_INPUT, EXIT_OK, main

FLAT = """\
[grid]
n = 64

[flow]
t_end = 0.01
ladder_depth = 2
levels = [4, 6]

[checks]
names = ["area_conservation", "maximum_principle", "gauss_bonnet"]
counterexample_levels = [2, 3]

[sampling]
seed = 7
pairs = 40

[output]
directory = "{directory}"
"""


@pytest.fixture
def flat_config(tmp_path):
    path = tmp_path / "flat.toml"
    path.write_text(FLAT.format(directory=(tmp_path / "out").as_posix()))
    return path


@pytest.fixture
def out_dir(tmp_path):
    return tmp_path / "out"


def run_cli(config, *args):
    return main(["--config", str(config), "--quiet", *args])


def test_run_writes_checkpoints_and_diagnostics(flat_config, out_dir):
    """Test run integrates the ladder and writes its artifacts"""
    assert run_cli(flat_config, "run") == EXIT_OK
    assert (out_dir / "diagnostics.csv").exists()
    assert sorted(p.name for p in out_dir.glob("checkpoint_*.krf")) == [
        "checkpoint_00.krf", "checkpoint_01.krf", "checkpoint_02.krf",
    ]
    assert (out_dir / "manifest.json").exists()


def test_runs_are_deterministic(flat_config, tmp_path):
    """Test two runs of one config produce identical diagnostics"""
    first, second = tmp_path / "first", tmp_path / "second"
    assert run_cli(flat_config, "--out", str(first), "run") == EXIT_OK
    assert run_cli(flat_config, "--out", str(second), "run") == EXIT_OK
    assert (first / "diagnostics.csv").read_bytes() == (second / "diagnostics.csv").read_bytes()


def test_missing_key_is_input_error(tmp_path, capsys):
    """Test a config without grid.n exits with code 2"""
    path = tmp_path / "broken.toml"
    path.write_text("[grid]\n\n[flow]\nt_end = 0.5\n")
    assert run_cli(path, "run") == EXIT_INPUT
    assert "grid.n" in capsys.readouterr().err


def test_cusp_config_is_input_error(tmp_path, capsys):
    """Test a minus pole with nu >= 2 exits with code 2 before any work"""
    path = tmp_path / "cusp.toml"
    path.write_text(FLAT.format(directory=(tmp_path / "out").as_posix())
                    + '\n[[pole]]\nx = 0.5\ny = 0.5\nnu = 2.1\nsign = "minus"\n')
    assert run_cli(path, "run") == EXIT_INPUT
    assert "cusp" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_dist_limit(flat_config, out_dir):
    """Test limit distances are written without a prior run"""
    assert run_cli(flat_config, "dist", "--limit") == EXIT_OK
    assert (out_dir / "distances.csv").exists()


def test_dist_at_ladder_time(flat_config, out_dir, capsys):
    """Test dist reads a stored checkpoint and lists the ladder on a miss"""
    assert run_cli(flat_config, "run") == EXIT_OK
    assert run_cli(flat_config, "dist", "--t", "0.005") == EXIT_OK
    assert (out_dir / "distances.csv").exists()
    capsys.readouterr()
    assert run_cli(flat_config, "dist", "--t", "0.003") == EXIT_INPUT
    assert "available" in capsys.readouterr().err


def test_dist_without_run(flat_config, capsys):
    """Test dist --t before run points at the run subcommand"""
    assert run_cli(flat_config, "dist", "--t", "0.005") == EXIT_INPUT
    assert "run" in capsys.readouterr().err


def test_mixed_provenance_needs_force(flat_config, tmp_path, capsys):
    """Test a changed seed may not reuse the directory unless forced"""
    assert run_cli(flat_config, "run") == EXIT_OK
    assert run_cli(flat_config, "--seed", "8", "run") == EXIT_INPUT
    assert "mixed provenance" in capsys.readouterr().err
    assert run_cli(flat_config, "--seed", "8", "--force", "run") == EXIT_OK


def test_verify_and_report(flat_config, out_dir, capsys):
    """Test verify writes report.csv and report renders it with heatmaps"""
    assert run_cli(flat_config, "run") == EXIT_OK
    assert run_cli(flat_config, "verify") == EXIT_OK
    assert (out_dir / "report.csv").exists()
    assert "Overall: PASS (3 checks)" in capsys.readouterr().out
    assert run_cli(flat_config, "report") == EXIT_OK
    assert (out_dir / "u_last.pgm").exists()
    assert (out_dir / "distance_last.pgm").exists()


def test_report_without_verify(flat_config, capsys):
    """Test report before verify is an input error"""
    assert run_cli(flat_config, "report") == EXIT_INPUT
    assert "verify" in capsys.readouterr().err


def test_counterexample_level(flat_config, out_dir):
    """Test the counterexample subcommand at a single level"""
    assert run_cli(flat_config, "counterexample", "--level", "2") == EXIT_OK
    assert (out_dir / "counterexample.csv").exists()


if __name__ == "__main__":
    pytest.main([__file__])
