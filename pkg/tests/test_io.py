import gzip
import math
import struct
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from mimae.errors import ConfigError, ContractError, FormatError
from mimae.io.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from mimae.io.config import FIELDS, RunConfig, describe, dump_config, load_config, parse_config
from mimae.io.dataset import (
    Dataset,
    SyntheticSpec,
    dataset_bytes,
    gen_synthetic,
    load_dataset,
    load_idx,
    parse_dataset,
    write_dataset,
)
from mimae.io.metrics import COLUMNS, metrics_text, read_metrics, write_metrics
from mimae.io.plot import line_chart, nice_ticks, plot_metrics, plot_runs
from mimae.trainer import TrainConfig, init_state, train_step

SVG = "{http://www.w3.org/2000/svg}"


# ---------------------------------------------------------------- dataset
def test_synthetic_balance_range_and_determinism(tmp_path):
    ds = gen_synthetic(SyntheticSpec(num_images=1000, class_count=4, seed=2))
    assert np.bincount(ds.labels).tolist() == [250] * 4
    assert ds.images.dtype == np.float32 and ds.images.min() >= 0 and ds.images.max() <= 1
    a = write_dataset(tmp_path / "a.mimds", ds).read_bytes()
    b = write_dataset(tmp_path / "b.mimds", gen_synthetic(SyntheticSpec(num_images=1000, class_count=4, seed=2)))
    assert a == b.read_bytes()
    assert gen_synthetic(SyntheticSpec(num_images=1000, class_count=4, seed=3)) != ds


def test_synthetic_classes_differ_on_average():
    ds = gen_synthetic(SyntheticSpec(num_images=400, class_count=4, seed=0))
    spectra = [np.abs(np.fft.fft2(ds.images[ds.labels == c, 0])).mean(axis=0) for c in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.abs(spectra[i] - spectra[j]).max() > 1.0


def test_dataset_roundtrip_and_layout(tmp_path):
    ds = gen_synthetic(SyntheticSpec(num_images=10, image_size=8, channels=2, class_count=3))
    path = write_dataset(tmp_path / "d.mimds", ds)
    assert load_dataset(path) == ds
    raw = path.read_bytes()
    assert raw[:6] == b"MIMDS1" and struct.unpack_from("<5I", raw, 6) == (10, 8, 8, 2, 3)
    assert len(raw) == 26 + 10 * (8 * 8 * 2 * 4 + 2)
    first_label = struct.unpack_from("<H", raw, 26 + 8 * 8 * 2 * 4)[0]
    assert first_label == ds.labels[0]


def test_dataset_truncation_reports_offset(tmp_path):
    ds = gen_synthetic(SyntheticSpec(num_images=5, image_size=8, class_count=2))
    raw = dataset_bytes(ds)
    record = 8 * 8 * 4 + 2
    with pytest.raises(FormatError) as info:
        parse_dataset(raw[:-1], "x.mimds")
    assert info.value.offset == 26 + 4 * record and "truncated" in str(info.value)
    with pytest.raises(FormatError) as info:
        parse_dataset(raw[:10])
    assert info.value.offset == 10
    with pytest.raises(FormatError):
        parse_dataset(raw + b"\0")
    with pytest.raises(FormatError) as info:
        parse_dataset(b"XXXXXX" + raw[6:])
    assert info.value.offset == 0


def test_dataset_rejects_out_of_range_label():
    ds = gen_synthetic(SyntheticSpec(num_images=3, image_size=8, class_count=2))
    raw = bytearray(dataset_bytes(ds))
    record = 8 * 8 * 4 + 2
    struct.pack_into("<H", raw, 26 + 2 * record + record - 2, 9)
    with pytest.raises(FormatError) as info:
        parse_dataset(bytes(raw))
    assert info.value.offset == 26 + 2 * record + record - 2


def test_shuffle_is_a_seeded_permutation():
    ds = gen_synthetic(SyntheticSpec(num_images=37, image_size=8, class_count=3))
    order = ds.order(5, epoch=2)
    assert sorted(order.tolist()) == list(range(37))
    assert np.array_equal(order, ds.order(5, epoch=2)) and not np.array_equal(order, ds.order(5, epoch=3))
    batches = list(ds.batches(8, 5, 2))
    assert len(batches) == ds.steps_per_epoch(8) == 4
    assert len(set(np.concatenate(batches).tolist())) == 32


def test_stratified_split():
    ds = gen_synthetic(SyntheticSpec(num_images=100, image_size=8, class_count=4))
    train, test = ds.split(0.25, seed=1)
    assert len(train) == 76 and len(test) == 24  # round(25 * 0.25) = 6 per class
    assert np.bincount(test.labels).tolist() == [6] * 4


def test_idx_import(tmp_path):
    imgs = np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 4, 4)
    (tmp_path / "i.idx.gz").write_bytes(gzip.compress(b"\0\0\x08\x03" + struct.pack(">3I", 2, 4, 4) + imgs.tobytes()))
    (tmp_path / "l.idx").write_bytes(b"\0\0\x08\x01" + struct.pack(">I", 2) + bytes([3, 1]))
    ds = load_idx(tmp_path / "i.idx.gz", tmp_path / "l.idx")
    assert ds.images.shape == (2, 1, 4, 4) and ds.labels.tolist() == [3, 1]
    assert ds.images[0, 0, 0, 1] == pytest.approx(1 / 255)
    (tmp_path / "bad.idx").write_bytes(b"\1\0\x08\x01")
    with pytest.raises(FormatError):
        load_idx(tmp_path / "bad.idx", tmp_path / "l.idx")


def test_dataset_contract():
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 8, 8), np.float32), np.zeros(2, np.int64), 2)
    with pytest.raises(ContractError):
        dataset_bytes(Dataset(np.zeros((1, 1, 2, 2), np.float32), np.array([5]), 2))


# ------------------------------------------------------------- checkpoint
@pytest.fixture
def trained_state(small_config, small_data):
    state = init_state(small_config, TrainConfig(batch_size=8), 6)
    for start in range(0, 24, 8):
        train_step(state, small_data.images[start:start + 8])
    state.history.append({"epoch": 1, "rec": 0.5})
    return state


def test_checkpoint_roundtrip_is_bitwise(trained_state, tmp_path):
    a = save_checkpoint(tmp_path / "a.mimae", trained_state)
    state = load_checkpoint(a)
    b = save_checkpoint(tmp_path / "b.mimae", state)
    assert a.read_bytes() == b.read_bytes()
    assert state.global_step == 3 and state.history == trained_state.history
    for name, p in trained_state.model.parameters().items():
        np.testing.assert_array_equal(p.data, state.model.parameters()[name].data)
    for name in trained_state.opt_main.m:
        np.testing.assert_array_equal(trained_state.opt_main.v[name], state.opt_main.v[name])
    assert state.opt_approx.t == trained_state.opt_approx.t
    assert not (tmp_path / "a.mimae.tmp").exists()


def test_checkpoint_corruption_is_rejected(trained_state, tmp_path):
    raw = bytearray(save_checkpoint(tmp_path / "c.mimae", trained_state).read_bytes())
    raw[len(raw) // 2] ^= 0x01
    (tmp_path / "bad.mimae").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="CRC"):
        read_checkpoint(tmp_path / "bad.mimae")


def test_checkpoint_version_and_structure_errors():
    good = encode_checkpoint({"a": 1}, {"b": 2}, {"t": np.ones((2, 3), np.float32)})
    config, scalars, tensors = decode_checkpoint(good)
    assert config == {"a": 1} and scalars == {"b": 2} and tensors["t"].shape == (2, 3)

    def resealed(body):
        import zlib

        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    with pytest.raises(FormatError, match="version") as info:
        decode_checkpoint(resealed(good[:6] + struct.pack("<I", 2) + good[10:-4]))
    assert info.value.offset == 6
    with pytest.raises(FormatError, match="truncated"):
        decode_checkpoint(resealed(good[:-8]))
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(resealed(good[:-4] + b"\0"))
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(b"NOTIT1" + good[6:])
    with pytest.raises(ContractError):
        encode_checkpoint({}, {}, {"t": np.ones(2)})


# ----------------------------------------------------------------- metrics
def rows(n):
    return [{"epoch": e, "step": 8 * e, "lr": 1e-3, "rec": 1.0 / e, "max_mi": 3.0, "min_mi": 0.1,
             "approx": 40.0, "gate_open": int(e > 2), "probe_acc": "" if e % 2 else 0.5} for e in range(1, n + 1)]


def test_metrics_roundtrip(tmp_path):
    path = write_metrics(tmp_path / "m.csv", rows(50))
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(COLUMNS) and len(lines) == 51
    back = read_metrics(path)
    assert back[2]["rec"] == 1.0 / 3 and back[0]["probe_acc"] is None and back[1]["probe_acc"] == 0.5
    assert metrics_text([]) == ",".join(COLUMNS) + "\n"


@pytest.mark.parametrize("bad,row", [("1,8,0.1,0.5,3,0.1,40,0\n", 1), ("1,8,0.1,x,3,0.1,40,0,\n", 1),
                                     ("1,8,0.1,0.5,3,0.1,40,0,\n2,16,0.1,nan,3,0.1,40,0,\n", 2)])
def test_metrics_parse_errors_name_the_row(tmp_path, bad, row):
    path = tmp_path / "m.csv"
    path.write_text(",".join(COLUMNS) + "\n" + bad)
    with pytest.raises(FormatError, match=f"row {row}") as info:
        read_metrics(path)
    assert info.value.offset == row


def test_metrics_empty_file(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(FormatError):
        read_metrics(tmp_path / "e.csv")


# -------------------------------------------------------------------- plot
def test_nice_ticks():
    assert nice_ticks(0, 1) == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    ticks = nice_ticks(3.0, 3.0)
    assert len(ticks) >= 2 and ticks[0] <= 3.0 <= ticks[-1]


def test_plots_are_xml_with_threshold(tmp_path):
    write_metrics(tmp_path / "run" / "metrics.csv", rows(10))
    files = plot_metrics([tmp_path / "run" / "metrics.csv"], tmp_path / "plots")
    names = {p.name for p in files}
    assert {"rec.svg", "max_mi.svg", "gate_open.svg", "probe_acc.svg"} <= names
    rec = ET.parse(tmp_path / "plots" / "rec.svg").getroot()
    lines = [e for e in rec.iter(f"{SVG}line") if e.get("class") == "threshold"]
    assert len(lines) == 1 and float(lines[0].get("data-value")) == 0.5
    assert lines[0].get("y1") == lines[0].get("y2")
    texts = [e.text for e in rec.iter(f"{SVG}text")]
    assert "epoch" in texts and "rec" in texts
    for p in files:
        root = ET.parse(p).getroot()
        assert len([e for e in root.iter(f"{SVG}polyline") if e.get("class") == "series"]) == 1
        if p.name != "rec.svg":
            assert not [e for e in root.iter(f"{SVG}line") if e.get("class") == "threshold"]


def test_plot_overlays_runs(tmp_path):
    files = plot_runs({"r=0.5": rows(5), "r=0.75": rows(6)}, tmp_path)
    root = ET.parse(files[0]).getroot()
    assert len([e for e in root.iter(f"{SVG}polyline") if e.get("class") == "series"]) == 2
    assert "r=0.75" in [e.text for e in root.iter(f"{SVG}text")]


def test_plot_header_only_is_an_error(tmp_path):
    (tmp_path / "m.csv").write_text(",".join(COLUMNS) + "\n")
    with pytest.raises(FormatError):
        plot_metrics(tmp_path / "m.csv", tmp_path / "plots")
    assert not list((tmp_path).glob("plots/*.svg"))


def test_line_chart_skips_missing_points():
    svg = line_chart({"a": ([1, 2, 3], [1.0, None, 2.0])}, title="t", xlabel="x", ylabel="y")
    ET.fromstring(svg)


# ------------------------------------------------------------------ config
def test_empty_config_gives_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig() and cfg.num_masks == 4
    assert cfg.model_config().embed_dim == 64 and cfg.train_config().weights.lambda3 == 10.0


def test_config_parses_types_comments_and_overrides():
    text = 'mask_ratio = 0.5  # two masks\nout_dir = "a # b"\nnorm_pix = yes\nbench_rhos = 0.1, 0.2\n\n'
    cfg = parse_config(text, ["seed=3", "mask_ratio=0.9"])
    assert cfg.out_dir == "a # b" and cfg.norm_pix is True and cfg.bench_rhos == (0.1, 0.2)
    assert cfg.seed == 3 and cfg.num_masks == 10


@pytest.mark.parametrize("text,key,line", [
    ("epochs = 5\nmask_ratio = 1.5\n", "mask_ratio", 2),
    ("bogus = 1\n", "bogus", 1),
    ("epochs = many\n", "epochs", 1),
    ("epochs = 2\nepochs = 3\n", "epochs", 2),
    ("tau = inf\n", "tau", 1),
    ("gate_mode = sometimes\n", "gate_mode", 1),
])
def test_config_errors_carry_key_and_line(text, key, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key and info.value.line == line
    assert key in str(info.value) and f"line {line}" in str(info.value)


def test_config_cross_checks():
    with pytest.raises(ConfigError):
        parse_config("patch_size = 5\n")
    with pytest.raises(ConfigError):
        parse_config("", ["no_equals_sign"])
    with pytest.raises(ConfigError):
        parse_config("just words\n")


def test_config_roundtrip_and_docs(tmp_path):
    cfg = parse_config("", ["out_dir=x y", "bench_rhos=0.5", "lambda3=0.0", "resume=true"])
    assert parse_config(dump_config(cfg)) == cfg
    doc = describe()
    assert all(f"\n{k} = " in "\n" + doc for k in FIELDS) and all(f.metadata["doc"] for f in FIELDS.values())
    assert parse_config(doc) == RunConfig()
    (tmp_path / "c.txt").write_text("epochs = 7\n")
    assert load_config(tmp_path / "c.txt", ["seed=1"]).epochs == 7
    with pytest.raises(OSError):
        load_config(tmp_path / "missing.txt")
    (tmp_path / "bin.txt").write_bytes(b"\xff\xfe")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bin.txt")


def test_config_float_values_are_finite():
    assert all(math.isfinite(v) for v in (RunConfig().tau, RunConfig().eps_l))
