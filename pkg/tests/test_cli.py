import subprocess
import sys

import numpy as np
import pytest

from dvnet.cli import main
from dvnet.structures import CellList, VesselGraph
from dvnet.volume_io import Volume, load_volume, save_volume

TINY_CFG = """\
levels=1
lu_layers=1
growth_rate=4
input_features=4
theta_down=0.5
theta_up=0.5
dropout_rate=0.0
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A phantom on disk and a checkpoint trained on it through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    (d / "net.txt").write_text(TINY_CFG)
    (d / "ph.txt").write_text("shape=24,24,24\nn_cells=2\ncell_radius=3,4\nvessel_segments=2\nvessel_radius=1.5,2\nsegment_length=6,10\n")
    assert main(["phantom", "--config", str(d / "ph.txt"), "--seed", "4", "--out", str(d / "ph")]) == 0
    rc = main([
        "train", "--config", str(d / "net.txt"), "--data", str(d / "ph"), "--iterations", "6",
        "--batch-size", "1", "--loss", "xent", "--checkpoint", str(d / "net.ckpt"), "--history", str(d / "hist.csv"),
        "--deterministic",
    ])
    assert rc == 0
    return d


def test_plan_prints_table(capsys):
    assert main(["plan"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["layer", "depth", "dimension"]
    assert out[9].split()[-2:] == ["616", "X/8"]
    assert out[-1] == "parameters: 11247966"


def test_phantom_outputs(workdir):
    d = workdir / "ph"
    vol = load_volume(d / "volume.raw")
    assert vol.data.shape == (24, 24, 24) and vol.data.dtype == np.uint8
    assert len(CellList.load(d / "cells.csv")) == 2
    assert VesselGraph.load(d / "vessels.txt").n_edges >= 1
    assert "seed=4" in (d / "phantom.txt").read_text()


def test_train_outputs(workdir):
    assert (workdir / "net.ckpt").stat().st_size > 0
    assert len((workdir / "hist.csv").read_text().splitlines()) == 7


def test_predict_detect_trace_evaluate(workdir, capsys):
    d = workdir
    common = ["--checkpoint", str(d / "net.ckpt"), "--tile", "16", "--overlap", "8"]
    assert main(["predict", "--input", str(d / "ph" / "volume.raw"), "--out", str(d / "pred"), *common]) == 0
    labels = load_volume(d / "pred" / "labels.raw").data
    assert labels.shape == (24, 24, 24) and labels.max() <= 2
    assert main(["detect-cells", "--input", str(d / "pred" / "prob_class1.raw"), "--out", str(d / "cells.csv"), "--rmax", "5"]) == 0
    assert main(["trace-vessels", "--input", str(d / "pred" / "prob_class2.raw"), "--out", str(d / "v.txt")]) == 0
    assert (d / "v.txt.summary.json").exists()
    capsys.readouterr()
    rc = main([
        "evaluate", "--cells", str(d / "ph" / "cells.csv"), "--truth-cells", str(d / "ph" / "cells.csv"),
        "--labels", str(d / "pred" / "labels.raw"), "--truth-labels", str(d / "ph" / "labels.raw"),
        "--out", str(d / "report.csv"),
    ])
    assert rc == 0
    report = (d / "report.csv").read_text()
    assert "cells,2,0,0,1.000000,1.000000,1.000000" in report
    assert "mean," in report and "accuracy," in report


def test_pipeline_verb_deterministic(workdir):
    d = workdir
    args = ["pipeline", "--input", str(d / "ph" / "volume.raw"), "--checkpoint", str(d / "net.ckpt"), "--tile", "16", "--overlap", "8", "--rmax", "5"]
    assert main(args + ["--out", str(d / "p1"), "--threads", "1"]) == 0
    assert main(args + ["--out", str(d / "p2"), "--threads", "2"]) == 0
    for f in sorted((d / "p1").iterdir()):
        assert f.read_bytes() == (d / "p2" / f.name).read_bytes(), f.name


@pytest.mark.parametrize(
    "argv, tag",
    [
        (["predict", "--input", "nope.raw", "--out", "x"], "[load]"),
        (["evaluate"], "[evaluate]"),
        (["evaluate", "--cells", "a.csv"], "[evaluate]"),
    ],
)
def test_failures_exit_nonzero_with_stage(argv, tag, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("dvnet: " + tag)


def test_missing_input_volume_tagged(workdir, capsys):
    rc = main(["pipeline", "--input", str(workdir / "absent.raw"), "--checkpoint", str(workdir / "net.ckpt"), "--out", str(workdir / "o")])
    assert rc == 1
    assert "[load]" in capsys.readouterr().err


def test_corrupt_checkpoint_tagged(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    save_volume(Volume(np.zeros((4, 4, 4), np.uint8)), tmp_path / "v.raw")
    rc = main(["predict", "--checkpoint", str(bad), "--input", str(tmp_path / "v.raw"), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("dvnet: [load]")


def test_pipeline_component_error_tagged(workdir, capsys):
    rc = main([
        "pipeline", "--input", str(workdir / "ph" / "volume.raw"), "--checkpoint", str(workdir / "net.ckpt"),
        "--tile", "16", "--overlap", "8", "--rmax", "0", "--out", str(workdir / "bad"),
    ])
    assert rc == 1
    assert capsys.readouterr().err.startswith("dvnet: [detect-cells]")


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "dvnet", "plan", "--preset", "v1"], capture_output=True, text=True, timeout=120)
    assert r.returncode == 0
    assert "parameters: 2725305" in r.stdout
