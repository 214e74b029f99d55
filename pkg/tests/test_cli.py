import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest

from mimae.cli import main
from mimae.io.checkpoint import load_checkpoint
from mimae.io.metrics import read_metrics

TINY = """\
num_images = 32
image_size = 16
patch_size = 4
embed_dim = 16
encoder_depth = 1
decoder_dim = 8
decoder_depth = 1
num_heads = 2
latent_dim = 16
approx_hidden_dim = 16
batch_size = 8
epochs = 2
probe_epochs = 5
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY + f'out_dir = "{tmp_path / "out"}"\n')
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def ok(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    assert len(out.splitlines()) == 1
    return json.loads(out)


def failed(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code != 0 and out == ""
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return code, json.loads(lines[0])


def test_full_pipeline(capsys, tiny, tmp_path):
    out = tmp_path / "out"
    gen = ok(capsys, "gen-data", "--config", tiny)
    assert gen["images"] == 32 and gen["class_counts"] == [8, 8, 8, 8]
    data = gen["path"]

    pre = ok(capsys, "pretrain", "--config", tiny, "--set", f"data_path={data}", "--set", "probe_every=2")
    assert pre["epochs"] == 2 and pre["steps"] == 8
    rows = read_metrics(out / "metrics.csv")
    assert len(rows) == 2 and rows[-1]["probe_acc"] is not None
    assert (out / "config.txt").exists() and load_checkpoint(out / "checkpoint.mimae").epoch == 2

    probe = ok(capsys, "probe", "--config", tiny, "--set", f"data_path={data}")
    assert 0 <= probe["probe_acc"] <= 1
    assert json.loads((out / "probe.json").read_text())["probe_acc"] == probe["probe_acc"]

    plot = ok(capsys, "plot", "--config", tiny)
    assert any(f.endswith("rec.svg") for f in plot["files"])
    for f in plot["files"]:
        ET.parse(f)


def test_pretrain_is_reproducible_and_resumable(capsys, tiny, tmp_path):
    ok(capsys, "pretrain", "--config", tiny, "--set", f"out_dir={tmp_path / 'a'}")
    ok(capsys, "pretrain", "--config", tiny, "--set", f"out_dir={tmp_path / 'b'}")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.mimae").read_bytes() == (tmp_path / "b" / "checkpoint.mimae").read_bytes()

    # resuming a finished run is a no-op; a changed config is refused
    c = tmp_path / "c"
    ok(capsys, "pretrain", "--config", tiny, "--set", f"out_dir={c}", "--set", "checkpoint_every=1")
    resumed = ok(capsys, "pretrain", "--config", tiny, "--set", f"out_dir={c}", "--set", "checkpoint_every=1",
                 "--set", "resume=true")
    assert resumed["epochs"] == 2
    code, err = failed(capsys, "pretrain", "--config", tiny, "--set", f"out_dir={c}", "--set", "resume=true",
                       "--set", "lambda3=1.0")
    assert code == 2 and "different configuration" in err["message"]


def test_mi_bench(capsys, tmp_path):
    res = ok(capsys, "mi-bench", "--set", f"out_dir={tmp_path}", "--set", "bench_rhos=0.0,0.6",
             "--set", "bench_samples=2000")
    assert res["rows"] == 2 and res["failures"] == []
    lines = (tmp_path / "mi_bench.csv").read_text().splitlines()
    assert lines[0] == "rho,dim,true_mi,club,infonce,pass_club,pass_infonce" and len(lines) == 3


def test_config_errors_are_single_json_lines(capsys, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = 3\nmask_ratio = 1.5\n")
    code, err = failed(capsys, "pretrain", "--config", bad)
    assert code == 2 and err["kind"] == "config" and err["key"] == "mask_ratio" and err["line"] == 2
    code, err = failed(capsys, "gen-data", "--set", "nonsense=1")
    assert code == 2 and err["key"] == "nonsense"


def test_format_and_io_errors(capsys, tiny, tmp_path):
    ok(capsys, "gen-data", "--config", tiny)
    data = tmp_path / "out" / "data.mimds"
    data.write_bytes(data.read_bytes()[:-1])
    code, err = failed(capsys, "pretrain", "--config", tiny, "--set", f"data_path={data}")
    assert code == 3 and err["kind"] == "format" and err["offset"] > 0 and err["path"].endswith("data.mimds")
    code, err = failed(capsys, "probe", "--config", tiny, "--set", f"checkpoint={tmp_path / 'none.mimae'}")
    assert code == 5 and err["kind"] == "io"
    (tmp_path / "h.csv").write_text("epoch,step,lr,rec,max_mi,min_mi,approx,gate_open,probe_acc\n")
    code, err = failed(capsys, "plot", "--set", f"metrics_path={tmp_path / 'h.csv'}")
    assert code == 3


def test_shape_mismatch_between_data_and_config(capsys, tiny, tmp_path):
    ok(capsys, "gen-data", "--config", tiny, "--set", "image_size=8")
    code, err = failed(capsys, "pretrain", "--config", tiny, "--set", f"data_path={tmp_path / 'out' / 'data.mimds'}")
    assert code == 2 and "expects" in err["message"]


def test_usage_errors(capsys):
    code, err = failed(capsys)
    assert code == 2 and err["kind"] == "usage"
    code, err = failed(capsys, "train")
    assert code == 2
    code, err = failed(capsys, "probe", "--bogus")
    assert code == 2


def test_keys_lists_every_field(capsys):
    code, out, _ = run(capsys, "keys")
    assert code == 0 and "lambda3 = 10.0" in out and "eps_l = 0.5" in out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mimae", "gen-data", "--set", f"out_dir={tmp_path}",
                           "--set", "num_images=8", "--set", "image_size=8", "--set", "patch_size=4"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0 and json.loads(proc.stdout)["images"] == 8
    proc = subprocess.run([sys.executable, "-m", "mimae", "gen-data", "--set", "epochs=0"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 2 and json.loads(proc.stderr)["key"] == "epochs"
