import json

import numpy as np
import pytest

from hcrom import cli
from hcrom import reduce as rd


@pytest.fixture(autouse=True)
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    return tmp_path


def test_offline_then_online(out_root):
    assert cli.main(["offline", "--level", "1", "--delta", "1e-5", "--run-id", "off"]) == 0
    model = out_root / "off" / "model"
    assert (model / "manifest.json").exists()
    cfg = json.loads((out_root / "off" / "config.json").read_text())
    assert cfg["level"] == 1 and cfg["delta"] == 1e-5 and cfg["command"] == "offline"
    assert cli.main(["online", "--model", str(model), "--delta", "1e-5", "--run-id", "on"]) == 0
    assert (out_root / "on" / "reconstruction.pgm").exists()
    assert (out_root / "on" / "config.json").exists()


def test_online_ingests_physical_data(out_root):
    from hcrom.fem import EMISSION, EXCITATION, assemble_system
    from hcrom.forward import solve_emission_adjoint, solve_excitation
    from hcrom.harness import make_phantom
    from hcrom.mesh import disk_mesh
    assert cli.main(["offline", "--level", "0", "--run-id", "off"]) == 0
    mesh = disk_mesh(0)
    k = mesh.n_boundary
    U = solve_excitation(assemble_system(mesh, EXCITATION), np.eye(k))
    V = solve_emission_adjoint(assemble_system(mesh, EMISSION), np.eye(k))
    from hcrom.fem import lumped_quadrature
    c = make_phantom(mesh).c_dagger
    M = V.T @ ((lumped_quadrature(mesh) * c)[:, None] * U)
    rd.write_matrix(out_root / "data.bin", M)
    rc = cli.main(["online", "--model", str(out_root / "off" / "model"), "--data",
                   str(out_root / "data.bin"), "--run-id", "ing"])
    assert rc == 0
    summary = json.loads((out_root / "ing" / "online.json").read_text())
    assert summary["discrepancy"] <= 1.5e-5


def test_delta_zero_rejected(capsys):
    assert cli.main(["offline", "--delta", "0"]) == cli.EXIT_VALIDATION
    assert "delta" in capsys.readouterr().err


def test_bad_model_is_validation_error(out_root):
    (out_root / "junk").mkdir()
    assert cli.main(["online", "--model", str(out_root / "junk")]) == cli.EXIT_VALIDATION


def test_oracle_passes_level0(out_root):
    assert cli.main(["oracle", "--level", "0", "--delta", "1e-5", "--run-id", "or"]) == 0
    text = (out_root / "or" / "oracle.csv").read_text()
    assert "verdict,PASS" in text


def test_config_json_roundtrip():
    cfg = cli.RunConfig(level=2, delta=1e-4, levels=(0, 1), structure_levels=(3,), oracle=True)
    back = cli.RunConfig.from_json(cfg.to_json())
    assert back == cfg
    with pytest.raises(cli.ConfigError, match="bogus"):
        cli.RunConfig.from_json('{"bogus": 1}')


def test_config_file_and_override(out_root, tmp_path):
    p = tmp_path / "c.json"
    p.write_text(cli.RunConfig(level=0, delta=1e-4, run_id="fromfile").to_json())
    cfg = cli.resolve_config(["offline", "--config", str(p), "--delta", "1e-3"])
    assert cfg.delta == 1e-3 and cfg.level == 0 and cfg.run_id == "fromfile"


def test_repro_small(out_root):
    rc = cli.main(["repro", "--levels", "0", "--oracle", "--run-id", "rp"])
    assert rc == 0
    for name in ("config.json", "table1.csv", "table4.csv", "table6.csv", "oracle.csv",
                 "phantom.pgm", "reconstruction.pgm"):
        assert (out_root / "rp" / name).exists(), name
    assert (out_root / "rp" / "model" / "manifest.json").exists()
