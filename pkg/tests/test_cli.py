import subprocess
import sys

import numpy as np
import pytest

from baf.cli import main
from baf.config import parse_config
from baf.errors import ConfigError
from baf.surrogate import save_surrogate
from baf.tensor import read_ften, write_ften


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, net):
    d = tmp_path_factory.mktemp("cli")
    (d / "net.npz").write_bytes(save_surrogate(net))
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_parse_config():
    cfg = parse_config("# comment\nC_list = 4, 8\nlr = 1e-3\ncodec = raw  # trailing\nn = 6\n")
    assert cfg == {"C_list": [4, 8], "lr": 1e-3, "codec": "raw", "n": 6}
    with pytest.raises(ConfigError):
        parse_config("no equals sign")


def test_end_to_end(workdir, capsys):
    d = workdir
    code, out, _ = run(capsys, "stats", "--net", d / "net.npz", "--C", 8, "--out", d / "sel.txt")
    assert code == 0 and "selected 8 of 32" in out
    code, out, _ = run(capsys, "--seed", 0, "train-baf", "--net", d / "net.npz", "--selection", d / "sel.txt",
                       "--n", 6, "--iterations", 5, "--out", d / "m.bafm")
    assert code == 0 and (d / "m.bafm").read_bytes()[:4] == b"BAFM"
    code, out, _ = run(capsys, "encode", "--net", d / "net.npz", "--selection", d / "sel.txt", "--n", 6,
                       "--index", 3, "--out", d / "s.bafc")
    report = dict(line.split() for line in out.splitlines())
    assert code == 0 and int(report["total_bits"]) == 8 * len((d / "s.bafc").read_bytes())
    code, out, _ = run(capsys, "decode", "--net", d / "net.npz", "--stream", d / "s.bafc", "--baf", d / "m.bafm",
                       "--out-tensor", d / "z.ften")
    assert code == 0 and out.startswith("class ")
    assert read_ften((d / "z.ften").read_bytes()).shape == (32, 16, 16)
    code, out, _ = run(capsys, "eval", "--net", d / "net.npz", "--selection", d / "sel.txt", "--n", 6,
                       "--baf", d / "m.bafm", "--eval-images", 8)
    assert code == 0 and "accuracy" in out and "restore_err" in out


def test_image_file_and_external_codec(workdir, capsys, dataset):
    d = workdir
    run(capsys, "stats", "--net", d / "net.npz", "--C", 4, "--out", d / "sel4.txt")
    (d / "img.ften").write_bytes(write_ften(dataset.images[0].astype(np.float32)))
    code, _, _ = run(capsys, "encode", "--net", d / "net.npz", "--selection", d / "sel4.txt", "--n", 5,
                     "--codec", "external", "--image", d / "img.ften", "--out", d / "e.bafc")
    assert code == 0 and (d / "e.pgm").exists() and (d / "e.hdr").exists()
    code, _, err = run(capsys, "decode", "--net", d / "net.npz", "--stream", d / "e.bafc")
    assert code == 2 and "companion" in err
    code, out, _ = run(capsys, "decode", "--net", d / "net.npz", "--stream", d / "e.bafc", "--companion", d / "e.pgm")
    assert code == 0


def test_stats_from_image_directory(workdir, capsys, dataset):
    d = workdir / "imgs"
    d.mkdir()
    for i in range(3):
        (d / f"{i}.ften").write_bytes(write_ften(dataset.images[i].astype(np.float32)))
    code, out, _ = run(capsys, "stats", "--net", workdir / "net.npz", "--C", 2, "--data-dir", d,
                       "--out", workdir / "dirsel.txt")
    assert code == 0 and "sample_count = 3" in (workdir / "dirsel.txt").read_text()


def test_sweep_with_config_is_reproducible(workdir, capsys):
    d = workdir
    (d / "sweep.cfg").write_text("C_list = 4, 8\nn_list = 2, 8\niterations = 3\neval_images = 8\nstats_images = 8\n")
    outs = []
    for i in range(2):
        code, _, _ = run(capsys, "--config", d / "sweep.cfg", "--seed", 1, "sweep", "--net", d / "net.npz",
                         "--models-dir", d / f"models{i}", "--out", d / f"sweep{i}.csv")
        assert code == 0
        outs.append((d / f"sweep{i}.csv").read_text())
    assert outs[0] == outs[1]
    lines = outs[0].splitlines()
    assert lines[0] == "C,n,codec,bits_mean,accuracy,restore_err" and len(lines) == 5
    assert sorted(p.name for p in (d / "models0").iterdir())[0] == "baf_C4_n2.bafm"


def test_exit_codes(workdir, capsys):
    d = workdir
    code, _, err = run(capsys, "stats", "--net", d / "net.npz", "--C", 3, "--out", d / "bad.txt")
    assert code == 2 and "power of two" in err
    code, _, _ = run(capsys, "decode", "--net", d / "missing.npz", "--stream", d / "x")
    assert code == 3
    (d / "junk.bafc").write_bytes(b"BAFC" + bytes(40))
    code, _, _ = run(capsys, "decode", "--net", d / "net.npz", "--stream", d / "junk.bafc")
    assert code == 3
    code, _, _ = run(capsys, "train-surrogate", "--out", d / "weak.npz", "--count", 64, "--epochs", 1)
    assert code == 4
    code, _, _ = run(capsys, "--config", d / "nope.cfg", "stats", "--net", d / "net.npz", "--out", d / "o.txt")
    assert code == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "baf", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("stats", "train-surrogate", "train-baf", "encode", "decode", "eval", "sweep"):
        assert sub in res.stdout
