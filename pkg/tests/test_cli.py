import dataclasses
import gzip
import json
import struct

import numpy as np
import pytest

from vlq import codec
from vlq.cli import SCHEMA, histogram_rows, main, read_config, ConfigError
from vlq.data import load_dataset, read_idx
from vlq.errors import CorruptDataset
from vlq.quant import QTensor, QuantParams
from vlq.vertical import decompose

from factories import random_layered


def write_idx(path, array, magic, compress=False):
    body = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.astype(np.uint8).tobytes()
    if compress:
        with gzip.open(str(path) + ".gz", "wb") as f:
            f.write(body)
    else:
        path.write_bytes(body)


def synthetic_mnist(root, train=256, test=200, seed=0, random_labels=False):
    rng = np.random.default_rng(seed)
    base = root / "mnist"
    base.mkdir(parents=True, exist_ok=True)
    for split, count, names in (
        ("train", train, ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")),
        ("test", test, ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")),
    ):
        labels = rng.integers(0, 10, size=count)
        img = rng.integers(0, 40, size=(count, 28, 28))
        if not random_labels:
            for k, lab in enumerate(labels):
                r, c = divmod(int(lab), 5)
                img[k, 4 + 10 * r : 12 + 10 * r, 2 + 5 * c : 6 + 5 * c] += 200
        write_idx(base / names[0], img, 2051)
        write_idx(base / names[1], labels, 2049)
    return root


@pytest.fixture
def data_root(tmp_path, monkeypatch):
    root = synthetic_mnist(tmp_path / "data")
    monkeypatch.setenv("VLQ_DATA_ROOT", str(root))
    return root


@pytest.fixture
def quick_cfg(tmp_path):
    path = tmp_path / "quick.cfg"
    path.write_text("width = 4\nfp_epochs = 1\nepochs = 1\nbatch_size = 64  # small\nlr = 0.02\n")
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def records(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


@pytest.fixture
def trained(tmp_path, data_root, quick_cfg, capsys):
    out = tmp_path / "run"
    code, _, err = run(["train", "--config", quick_cfg, "--out", out], capsys)
    assert code == 0, err
    return out


# -- configuration ------------------------------------------------------------------


def test_config_schema_and_rejections(tmp_path):
    good = tmp_path / "a.cfg"
    good.write_text("# comment\nmoo = mgd\ncompensate = off\nepochs = 7\n")
    assert read_config(good) == {"moo": "mgd", "compensate": False, "epochs": 7}
    for text in ("colour = red\n", "moo = adam\n", "epochs = many\n", "compensate = maybe\n"):
        bad = tmp_path / "b.cfg"
        bad.write_text(text)
        with pytest.raises(ConfigError):
            read_config(bad)
    assert all(key.doc for key in SCHEMA.values())


def test_shipped_config_parses():
    from pathlib import Path

    cfg = read_config(Path(__file__).parents[1] / "configs" / "mnist_n2.cfg")
    assert cfg["n"] == 2 and cfg["bn"] == "full" and cfg["kd"] == "cos"


def test_config_errors_exit_2(tmp_path, data_root, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate = 0.1\n")
    code, _, err = run(["train", "--config", bad, "--out", tmp_path / "x"], capsys)
    assert code == 2 and "learning_rate" in err


def test_missing_dataset_exits_2(tmp_path, monkeypatch, quick_cfg, capsys):
    monkeypatch.setenv("VLQ_DATA_ROOT", str(tmp_path / "nowhere"))
    code, _, err = run(["train", "--config", quick_cfg, "--out", tmp_path / "x"], capsys)
    assert code == 2 and "not found" in err


# -- train ---------------------------------------------------------------------------


def test_train_writes_model_metrics_and_state(trained):
    assert (trained / "model.vlq").exists()
    assert (trained / "model.vlq.e1").exists() and (trained / "model.vlq.e2").exists()
    recs = records((trained / "metrics.jsonl").read_text())
    phases = [r["phase"] for r in recs]
    assert phases[0] == "config" and "fp" in phases and phases.count("joint") == 3 and phases.count("eval") == 3
    joint = [r for r in recs if r["phase"] == "joint"]
    assert {"level", "loss", "train_acc", "alpha", "grad_norm"} <= set(joint[0])
    state = np.load(trained / "state.npz")
    assert int(state["seed"]) == 0 and any(k.startswith("velocity/") for k in state.files)


def test_train_is_deterministic(tmp_path, data_root, quick_cfg, capsys):
    outs = []
    for name in ("a", "b"):
        code, _, _ = run(["train", "--config", quick_cfg, "--seed", 7, "--out", tmp_path / name], capsys)
        assert code == 0
        outs.append(tmp_path / name)
    assert (outs[0] / "metrics.jsonl").read_bytes() == (outs[1] / "metrics.jsonl").read_bytes()
    assert (outs[0] / "model.vlq").read_bytes() == (outs[1] / "model.vlq").read_bytes()


def test_mgd_emits_iteration_alphas(tmp_path, data_root, quick_cfg, capsys):
    code, _, _ = run(["train", "--config", quick_cfg, "--moo", "mgd", "--out", tmp_path / "m"], capsys)
    assert code == 0
    iters = [r for r in records((tmp_path / "m" / "metrics.jsonl").read_text()) if r["phase"] == "iter"]
    assert len(iters) == 256 // 64
    for r in iters:
        assert len(r["alpha"]) == 3 and sum(r["alpha"]) == pytest.approx(1.0)
        assert len(r["grad_norm"]) == 3


def test_ascending_trainer(tmp_path, data_root, quick_cfg, capsys):
    code, out, _ = run(["train", "--config", quick_cfg, "--trainer", "ascending", "--out", tmp_path / "asc"], capsys)
    assert code == 0
    assert not codec.peek_manifest(tmp_path / "asc" / "model.vlq").compensate


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(tmp_path, data_root, capsys):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text("width = 4\nfp_epochs = 1\nepochs = 1\nbatch_size = 64\nfp_lr = 1e300\n")
    code, _, err = run(["train", "--config", cfg, "--out", tmp_path / "d"], capsys)
    assert code == 3 and "diverged" in err


# -- assemble / eval -------------------------------------------------------------------


def test_assemble_reads_only_needed_sections(trained, tmp_path, capsys):
    model = trained / "model.vlq"
    sizes = codec.section_sizes(codec.peek_manifest(model))
    recs = []
    for bits in (2, 3, 4):
        code, out, _ = run(["assemble", model, "--bits", bits], capsys)
        assert code == 0
        recs.append(records(out)[0])
    assert [r["bits"][0] for r in recs] == [2, 3, 4]
    assert recs[1]["bytes_read"] - recs[0]["bytes_read"] == sizes[1] + 9
    assert recs[2]["bytes_read"] - recs[1]["bytes_read"] == sizes[2] + 9
    code, out, _ = run(["assemble", model, "--bits", 3, "--out", tmp_path / "three.vlq"], capsys)
    assert code == 0 and (tmp_path / "three.vlq").stat().st_size == records(out)[0]["written"]


def test_assemble_missing_level_exits_4(trained, capsys):
    (trained / "model.vlq.e2").unlink()
    code, _, err = run(["assemble", trained / "model.vlq", "--bits", 4], capsys)
    assert code == 4 and "[2]" in err
    assert run(["assemble", trained / "model.vlq", "--bits", 3], capsys)[0] == 0
    assert run(["assemble", trained / "model.vlq", "--bits", 9], capsys)[0] == 2


def test_eval_all_levels_repeatable(trained, capsys):
    code, out, _ = run(["eval", trained / "model.vlq", "--all"], capsys)
    assert code == 0
    first = records(out)
    assert [r["bits"][0] for r in first] == [2, 3, 4] and all(r["samples"] == 200 for r in first)
    assert records(run(["eval", trained / "model.vlq", "--all"], capsys)[1]) == first
    one = records(run(["eval", trained / "model.vlq", "--bits", 3], capsys)[1])
    assert one == [first[1]]


def test_eval_shape_mismatch_exits_2(trained, data_root, capsys):
    base = data_root / "cifar10"
    base.mkdir()
    rec = np.zeros((5, 3073), dtype=np.uint8)
    (base / "test_batch.bin").write_bytes(rec.tobytes())
    code, _, err = run(["eval", trained / "model.vlq", "--dataset", "cifar10"], capsys)
    assert code == 2 and "expects inputs" in err


def test_random_model_is_at_chance(tmp_path, monkeypatch, capsys):
    root = synthetic_mnist(tmp_path / "rnd", train=16, test=10000, seed=3, random_labels=True)
    monkeypatch.setenv("VLQ_DATA_ROOT", str(root))
    path = tmp_path / "random.vlq"
    codec.write_model(random_layered(np.random.default_rng(9)), path)
    code, out, _ = run(["eval", path, "--bits", 2], capsys)
    assert code == 0
    assert abs(records(out)[0]["top1"] - 0.1) <= 0.02


# -- mix / inspect ----------------------------------------------------------------------


def test_mix_budget_and_sweep(trained, tmp_path, capsys):
    model = trained / "model.vlq"
    total = sum(s.weight_count for s in codec.peek_manifest(model).arch.layers)
    code, out, _ = run(["mix", model, "--budget-bits", 3 * total, "--calib", 128, "--out", tmp_path / "mix.vlq"], capsys)
    assert code == 0
    rec = records(out)[0]
    assert rec["total_bits"] <= 3 * total and len(rec["layers"]) == 2 and 0 <= rec["top1"] <= 1
    assert codec.peek_manifest(tmp_path / "mix.vlq").allocation == rec["levels"]
    code, out, _ = run(["eval", tmp_path / "mix.vlq", "--bits", "mixed"], capsys)
    assert code == 0 and records(out)[0]["bits"] == [2 + k for k in rec["levels"]]
    code, out, _ = run(["mix", model, "--sweep", f"{2 * total},{3 * total},{4 * total}", "--calib", 0], capsys)
    sweep = records(out)
    assert code == 0 and [r["objective"] for r in sweep] == sorted((r["objective"] for r in sweep), reverse=True)
    assert run(["mix", model, "--budget-bits", total, "--calib", 0], capsys)[0] == 2


def test_inspect_histograms(trained, capsys):
    code, out, _ = run(["inspect", trained / "model.vlq"], capsys)
    assert code == 0
    rows = [line.split("\t") for line in out.splitlines() if line and not line.startswith(("#", "layer"))]
    model = codec.decode_full(trained / "model.vlq")
    for m, spec in enumerate(model.arch.layers):
        for k in range(3):
            sel = [r for r in rows if int(r[0]) == m and int(r[1]) == k]
            assert sum(int(r[4]) for r in sel) == spec.weight_count
            lo, hi = -(2 ** (1 + k)), 2 ** (1 + k) - 1
            assert all(lo <= int(r[3]) <= hi for r in sel)
        assert len([r for r in rows if int(r[0]) == m and int(r[1]) == 0]) <= 4


def test_histogram_of_zero_layer():
    model = random_layered(np.random.default_rng(2))
    zero = decompose(QTensor(np.zeros(model.arch.layers[0].weight_shape, dtype=np.int32), QuantParams(0.1, 4)), 2)
    model = dataclasses.replace(model, stacks=[zero] + list(model.stacks[1:]))
    rows = [r for r in histogram_rows(model) if r[0] == 0]
    count = model.arch.layers[0].weight_count
    assert rows == [(0, 0, 2, 0, count), (0, 1, 3, 0, count), (0, 2, 4, 0, count)]


def test_inspect_corrupt_file_exits_4(trained, capsys):
    path = trained / "model.vlq"
    raw = bytearray(path.read_bytes())
    raw[20] ^= 0xFF
    path.write_bytes(bytes(raw))
    assert run(["inspect", path], capsys)[0] == 4


# -- dataset loading ------------------------------------------------------------------------


def test_idx_reader_and_magic_check(tmp_path):
    arr = np.arange(24).reshape(2, 3, 4)
    write_idx(tmp_path / "ok", arr, 2051)
    assert np.array_equal(read_idx(tmp_path / "ok", 2051), arr)
    write_idx(tmp_path / "zipped", arr, 2051, compress=True)
    assert np.array_equal(read_idx(tmp_path / "zipped", 2051), arr)
    with pytest.raises(CorruptDataset):
        read_idx(tmp_path / "ok", 2049)
    (tmp_path / "short").write_bytes((tmp_path / "ok").read_bytes()[:-3])
    with pytest.raises(CorruptDataset):
        read_idx(tmp_path / "short", 2051)


def test_loaded_shapes_and_determinism(tmp_path):
    root = synthetic_mnist(tmp_path, train=30, test=12)
    train = load_dataset("mnist", "train", root)
    assert train.images.shape == (30, 1, 28, 28) and train.labels.shape == (30,)
    assert load_dataset("mnist", "test", root).images.shape == (12, 1, 28, 28)
    a = train.get(np.arange(30), np.random.default_rng(1))[0]
    b = load_dataset("mnist", "train", root).get(np.arange(30), np.random.default_rng(1))[0]
    assert a.tobytes() == b.tobytes()
    assert abs(float((train.images / 255.0 - 0.1307).mean() / 0.3081) - float(a.mean())) < 1e-9


def test_cifar_records(tmp_path):
    base = tmp_path / "cifar10"
    base.mkdir()
    rng = np.random.default_rng(0)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        rec = rng.integers(0, 256, size=(3, 3073)).astype(np.uint8)
        rec[:, 0] = rng.integers(0, 10, size=3)
        (base / name).write_bytes(rec.tobytes())
    train = load_dataset("cifar10", "train", tmp_path)
    assert train.images.shape == (15, 3, 32, 32) and train.augment
    x1 = train.get(np.arange(15), np.random.default_rng(5))[0]
    x2 = train.get(np.arange(15), np.random.default_rng(5))[0]
    assert np.array_equal(x1, x2)
    (base / "test_batch.bin").write_bytes(b"\x0b" + bytes(3072))
    with pytest.raises(CorruptDataset):
        load_dataset("cifar10", "test", tmp_path)
