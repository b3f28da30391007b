"""Command-line front end: outputs, manifests, reproducibility and exit codes."""
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mvdlm.cli import RunConfig, main
from mvdlm.errors import ConfigurationError
from mvdlm.nifti import read_nifti
from mvdlm.simulate import dice

SPEC = {"dims": [8, 8, 6], "regions": [{"center": [3, 3, 3], "radius": 2, "effect": 200.0}],
        "snr": 8.0, "seed": 2, "design": {"n_scans": 100, "tr": 2.0, "period": 20.0}}
RUN = ["--draws", "100", "--burn-in", "20", "--workers", "1"]


def snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    Path("phantom.json").write_text(json.dumps(SPEC))
    return tmp_path


@pytest.fixture
def simulated(workdir):
    assert main(["simulate", "phantom.json", "-o", "sim"]) == 0
    return workdir


def rerun_identical(argv, out):
    assert main(argv) == 0
    first = snapshot(Path(out))
    shutil.rmtree(out)
    assert main(argv) == 0
    second = snapshot(Path(out))
    assert first.keys() == second.keys()
    for k in first:
        assert first[k] == second[k], k
    return first


class TestReproducibility:
    def test_design(self, workdir):
        Path("a.txt").write_text("0 20\n80 20\n")
        Path("b.txt").write_text("40,20\n120,20\n")
        argv = ["design", "a.txt", "b.txt", "--tr", "2", "--n-scans", "90", "-o", "d/design.csv"]
        assert main(argv) == 0
        first = snapshot(workdir / "d")
        assert main(argv) == 0
        assert snapshot(workdir / "d") == first
        assert Path("d/design.csv").read_text().splitlines()[0] == "a,b"
        man = json.loads(Path("d/design.csv.manifest.json").read_text())
        assert man["argv"] == argv and man["command"] == "design"

    def test_simulate(self, workdir):
        files = rerun_identical(["simulate", "phantom.json", "-o", "sim"], "sim")
        assert {"bold.nii.gz", "truth.nii.gz", "design.csv", "manifest.json"} <= set(files)
        truth, _ = read_nifti("sim/truth.nii.gz")
        assert truth.sum() == 33

    def test_fit(self, simulated):
        argv = ["fit", "sim/bold.nii.gz", "--design", "sim/design.csv", "-o", "fit"] + RUN
        files = rerun_identical(argv, "fit")
        assert "fest_average_task.nii.gz" in files and "summary.mvdlm/manifest.json" in files
        man = json.loads(files["manifest.json"])
        assert man["config"]["n_draws"] == 100 and man["seed"] == 0
        assert man["outputs"]["fest_average_task.nii.gz"]
        assert set(man["inputs"]) == {"sim/bold.nii.gz", "sim/design.csv"}

    def test_fit_detects_phantom(self, simulated):
        assert main(["fit", "sim/bold.nii.gz", "--design", "sim/design.csv", "-o", "fit",
                     "--kind", "marginal", "--no-summary"] + RUN) == 0
        ev, _ = read_nifti("fit/fest_marginal_task.nii.gz")
        truth, _ = read_nifti("sim/truth.nii.gz")
        assert dice(ev > 0.95, truth > 0) > 0.8
        assert not Path("fit/summary.mvdlm").exists()
        assert Path("fit/failures.log").read_text() == ""


class TestGroupAndAssess:
    def test_group(self, simulated):
        assert main(["fit", "sim/bold.nii.gz", "--design", "sim/design.csv", "-o", "s1"]
                    + RUN) == 0
        argv = ["group", "s1/summary.mvdlm", "s1/summary.mvdlm", "--group-b", "s1/summary.mvdlm",
                "-o", "g"] + RUN
        files = rerun_identical(argv, "g")
        assert "group_fsts_average_task.nii.gz" in files
        assert main(["group", "s1/summary.mvdlm", "--algorithm", "fest", "--design",
                     "sim/design.csv", "-o", "g2"] + RUN) == 0
        ev, _ = read_nifti("g2/group_fest_average_task.nii.gz")
        assert ev[3, 3, 3] > 0.95

    def test_assess(self, workdir, capsys):
        argv = ["assess", "--dims", "5", "5", "5", "--n-scans", "80", "--paradigm", "B1", "E2",
                "-o", "fpr"] + RUN
        files = rerun_identical(argv, "fpr")
        summary = json.loads(files["fpr_summary.json"])
        assert sorted(summary) == ["B1", "E2"]
        assert all(0 <= v["rate"] <= 0.05 and v["voxels"] == 125 for v in summary.values())
        out = capsys.readouterr().out
        assert out.splitlines()[0].startswith("B1\tfest\tmarginal\t")


class TestConfig:
    def test_file_then_flags(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"beta": 0.9, "n_draws": 50, "kind": "ACE"}))
        run = RunConfig.resolve(p, {"n_draws": 70, "seed": None})
        assert run.beta == 0.9 and run.n_draws == 70 and run.kind == "average"

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"betta": 0.9}))
        with pytest.raises(ConfigurationError, match="betta"):
            RunConfig.resolve(p)

    @pytest.mark.parametrize("bad", [dict(r=5), dict(beta=0.0), dict(threshold=1.5),
                                     dict(n_draws=0), dict(burn_in=0), dict(algorithm="mcmc")])
    def test_ranges(self, bad):
        with pytest.raises(ConfigurationError):
            RunConfig.resolve(None, bad)

    def test_config_echoed(self, simulated, capsys):
        Path("c.json").write_text(json.dumps({"threshold": 0.9}))
        assert main(["fit", "sim/bold.nii.gz", "--design", "sim/design.csv", "-o", "f",
                     "--config", "c.json", "--no-summary"] + RUN) == 0
        echoed = json.loads(capsys.readouterr().err.strip().splitlines()[0])
        assert echoed["threshold"] == 0.9 and echoed["n_draws"] == 100


class TestExitCodes:
    def test_bad_parameter(self, simulated):
        assert main(["fit", "sim/bold.nii.gz", "--design", "sim/design.csv", "-o", "f",
                     "--beta", "1.5"]) == 2

    def test_unknown_config_key(self, simulated):
        Path("c.json").write_text('{"nope": 1}')
        assert main(["fit", "sim/bold.nii.gz", "--design", "sim/design.csv", "-o", "f",
                     "--config", "c.json"]) == 2

    def test_missing_file(self, workdir):
        assert main(["fit", "missing.nii", "--design", "d.csv", "-o", "f"]) == 3

    def test_corrupt_input(self, simulated):
        Path("bad.nii.gz").write_bytes(Path("sim/bold.nii.gz").read_bytes()[:200])
        assert main(["fit", "bad.nii.gz", "--design", "sim/design.csv", "-o", "f"]) == 3

    def test_unsupported_group_combination(self, simulated):
        assert main(["fit", "sim/bold.nii.gz", "--design", "sim/design.csv", "-o", "s1"]
                    + RUN) == 0
        assert main(["group", "s1/summary.mvdlm", "--algorithm", "fest", "-o", "g"]) == 4

    def test_console_script(self, workdir):
        res = subprocess.run([sys.executable, "-m", "mvdlm.cli", "--version"],
                             capture_output=True, text=True)
        assert res.returncode == 0 and res.stdout.startswith("mvdlm ")
