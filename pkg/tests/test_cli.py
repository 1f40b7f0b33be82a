import csv
import json

import pytest

from fpcc.cli import main
from fpcc.sparse import read_tensor_text

SMALL = {"scene": {"extent": [32.0, 32.0, 4.0], "grid": [32, 32, 8], "n_objects": 3,
                   "background_density": 0.02},
         "upsample_mode": "off"}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_gen_scene(tmp_path, cfg_path, capsys):
    out = tmp_path / "scene"
    assert main(["gen-scene", "--config", cfg_path, "--out", str(out), "--seed", "4"]) == 0
    t = read_tensor_text(out / "scene.txt")
    assert t.channels == 64 and t.grid == (32, 32, 8)
    assert len((out / "boxes.txt").read_text().splitlines()) == 3
    assert "voxels" in capsys.readouterr().out


def test_e2e_writes_reports(tmp_path, cfg_path):
    out = tmp_path / "e2e"
    assert main(["e2e", "--config", cfg_path, "--out", str(out), "--frames", "2",
                 "--snr-db", "5,inf"]) == 0
    r = rows(out / "frames.csv")
    assert len(r) == 4
    agg = json.loads((out / "aggregate.json").read_text())
    assert set(agg["per_snr"]) == {"5.0", "inf"}


def test_e2e_no_ldpc(tmp_path, cfg_path):
    out = tmp_path / "e2e"
    assert main(["e2e", "--config", cfg_path, "--out", str(out), "--frames", "1", "--no-ldpc"]) == 0
    assert json.loads((out / "aggregate.json").read_text())["config"]["ldpc"]["enabled"] is False


def test_ber_sweep(tmp_path, cfg_path):
    out = tmp_path / "ber"
    assert main(["ber-sweep", "--config", cfg_path, "--out", str(out), "--snr-db", "0,2",
                 "--trials", "20"]) == 0
    r = rows(out / "ber_sweep.csv")
    assert [float(x["snr_db"]) for x in r] == [0.0, 2.0]


def test_sweeps(tmp_path, cfg_path):
    out = tmp_path / "sw"
    assert main(["sweep-expansion", "--config", cfg_path, "--out", str(out), "--frames", "1",
                 "--values", "0,16"]) == 0
    assert len(rows(out / "sweep_expansion.csv")) == 2
    assert main(["sweep-channels", "--config", cfg_path, "--out", str(out), "--frames", "1",
                 "--values", "2,8"]) == 0
    assert [x["channels"] for x in rows(out / "sweep_channels.csv")] == ["2", "8"]
    assert main(["sweep-width", "--config", cfg_path, "--out", str(out), "--values", "4",
                 "--epochs", "1", "--train-frames", "4", "--snr-db", "0"]) == 0
    assert rows(out / "sweep_width.csv")[0]["width"] == "4"


def test_train_jscc(tmp_path, cfg_path):
    out = tmp_path / "train"
    assert main(["train-jscc", "--config", cfg_path, "--out", str(out), "--epochs", "2",
                 "--train-frames", "8", "--eval-frames", "2", "--snr-db", "0,20"]) == 0
    log = (out / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,loss,mse@0dB,mse@20dB"
    assert len(log) == 3
    assert (out / "jscc.fpcw").exists()


def test_mask_oracle(tmp_path, cfg_path, capsys):
    boxes = tmp_path / "boxes.txt"
    boxes.write_text("10 10 2 4 2 1.5\n20 5 1 1 1 1.7\n")
    assert main(["mask-oracle", "--config", cfg_path, "--out", str(tmp_path / "m"),
                 "--boxes", str(boxes)]) == 0
    assert "agrees" in capsys.readouterr().out


def test_encode_decode_round_trip(tmp_path, cfg_path):
    scene_dir = tmp_path / "scene"
    main(["gen-scene", "--config", cfg_path, "--out", str(scene_dir)])
    enc = tmp_path / "enc"
    assert main(["encode", "--config", cfg_path, "--out", str(enc),
                 "--input", str(scene_dir / "scene.txt"), "--snr-db", "inf"]) == 0
    meta = json.loads((enc / "meta.json").read_text())
    dec = tmp_path / "dec"
    assert main(["decode", "--config", cfg_path, "--out", str(dec), "--input", str(enc),
                 "--snr-db", "inf"]) == 0
    f4 = read_tensor_text(dec / "f4hat.txt")
    assert f4.n == meta["n_prime"] and f4.channels == 64


def test_errors_return_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"colour": 3}')
    assert main(["e2e", "--config", str(bad)]) == 1
    assert main(["e2e", "--config", str(tmp_path / "missing.json")]) == 1
    assert "error:" in capsys.readouterr().err


def test_bad_snr_rejected():
    with pytest.raises(SystemExit):
        main(["ber-sweep", "--snr-db", "nan"])
