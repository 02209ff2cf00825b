import json
import os

import numpy as np
import pytest

from sgone.cli import main, sim_map_to_pgm
from sgone.episodes import DatasetIndex
from sgone.pnm import read_pnm, save_mask
from sgone.trainer import initial_checkpoint, load_checkpoint

TINY_MODEL = """\
model.stem_channels = 4,6,8
model.guidance_block_channels = 8,8,8
model.seg_channels = 6
eval_episodes = 2
"""

SMALL_DATA = """\
synthetic.min_radius = 5
synthetic.max_radius = 8
"""


def tree(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    (ws / "data.cfg").write_text(SMALL_DATA)
    (ws / "tiny.cfg").write_text(TINY_MODEL)
    assert main(["gen-data", "--out", str(ws / "d"), "--seed", "7", "--categories", "8",
                 "--per-category", "6", "--image-size", "32", "--config", str(ws / "data.cfg")]) == 0
    assert main(["train", "--data", str(ws / "d"), "--out", str(ws / "run"), "--max-steps", "4",
                 "--eval-every", "2", "--config", str(ws / "tiny.cfg")]) == 0
    return ws


def test_gen_data_deterministic_and_counted(workspace, tmp_path, capsys):
    args = ["gen-data", "--out", str(tmp_path / "again"), "--seed", "7", "--categories", "8",
            "--per-category", "6", "--image-size", "32", "--config", str(workspace / "data.cfg")]
    assert main(args) == 0
    assert tree(tmp_path / "again") == tree(workspace / "d")
    assert len(DatasetIndex.load(tmp_path / "again").records) == 8 * 6
    assert "48 images" in capsys.readouterr().out


def test_gen_data_without_out_is_usage_error(capsys):
    assert main(["gen-data", "--seed", "1"]) == 2
    assert "sgone: usage error: --out is required" in capsys.readouterr().err


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--learning-rate", "0.1"])
    assert exc.value.code != 0


def test_unknown_config_key_rejected(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("learning_rat = 0.1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path)]) == 1
    assert "config error: unknown config key(s): learning_rat" in capsys.readouterr().err


def test_train_writes_resolved_config_and_logs(workspace):
    run = workspace / "run"
    text = (run / "config.txt").read_text()
    assert "learning_rate = " in text and "model.seg_channels = 6" in text
    assert "max_steps = 4" in text
    assert len((run / "metrics.tsv").read_text().splitlines()) == 5
    assert load_checkpoint(run / "checkpoint.sgone").step == 4


def test_train_zero_steps_is_initialisation(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "d"), "--out", str(tmp_path), "--max-steps", "0",
                 "--config", str(workspace / "tiny.cfg")]) == 0
    ckpt = load_checkpoint(tmp_path / "checkpoint.sgone")
    init = initial_checkpoint(ckpt.config)
    for k, p in init.params.items():
        assert ckpt.params[k].data.tobytes() == p.data.tobytes()


def test_train_rerun_identical_checkpoint(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "d"), "--out", str(tmp_path), "--max-steps", "4",
                 "--eval-every", "2", "--config", str(workspace / "tiny.cfg")]) == 0
    assert (tmp_path / "checkpoint.sgone").read_bytes() == (workspace / "run" / "checkpoint.sgone").read_bytes()


def run_eval(workspace, out, *extra):
    assert main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.sgone"), "--episodes", "3",
                 "--seed", "4", "--out", str(out), *extra]) == 0
    return json.loads((out / "report.json").read_text())


def test_eval_reports(workspace, tmp_path):
    a = run_eval(workspace, tmp_path / "a")
    b = run_eval(workspace, tmp_path / "b")
    assert a == b
    assert (tmp_path / "a" / "report.txt").read_text().startswith("fold 0")
    assert a["fold"] == 0 and sorted(a["per_category_iou"]) == ["1", "2"]

    k1 = run_eval(workspace, tmp_path / "k1", "--k", "1", "--strategy", "max")
    k5 = run_eval(workspace, tmp_path / "k5", "--k", "5", "--strategy", "max")
    for e1, e5 in zip(k1["per_episode"], k5["per_episode"]):
        assert e1["query"] == e5["query"]
        assert e5["pred_fg"] >= e1["pred_fg"]

    avg = run_eval(workspace, tmp_path / "avg", "--k", "1", "--strategy", "avg")
    assert {k: v for k, v in avg.items() if k != "strategy"} == {k: v for k, v in k1.items() if k != "strategy"}


def test_eval_threads_match_serial(workspace, tmp_path):
    assert run_eval(workspace, tmp_path / "t", "--threads", "3") == run_eval(workspace, tmp_path / "s")


def test_eval_bad_checkpoint(tmp_path, capsys):
    (tmp_path / "c.sgone").write_bytes(b"NOTACHECKPOINT")
    assert main(["eval", "--checkpoint", str(tmp_path / "c.sgone"), "--data", str(tmp_path)]) == 1
    assert "sgone: checkpoint error:" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.sgone")]) == 1
    assert "sgone: io error:" in capsys.readouterr().err


def predict_args(workspace, out, mask=None):
    d = workspace / "d"
    return ["predict", "--checkpoint", str(workspace / "run" / "checkpoint.sgone"),
            "--support-image", str(d / "images" / "c01_0000.ppm"),
            "--support-mask", str(mask or d / "masks" / "1" / "c01_0000.pgm"),
            "--query", str(d / "images" / "c01_0001.ppm"), "--out", str(out)]


def test_predict_writes_mask_and_sim_map(workspace, tmp_path):
    assert main(predict_args(workspace, tmp_path) + ["--emit-sim-map"]) == 0
    mask, _ = read_pnm(tmp_path / "pred_mask.pgm")
    assert mask.shape == (32, 32)
    assert set(np.unique(mask)) <= {0, 255}
    sim, maxval = read_pnm(tmp_path / "sim_map.pgm")
    assert sim.shape == (32, 32) and maxval == 255
    back = sim / 127.5 - 1.0
    assert back.min() >= -1.0 and back.max() <= 1.0


def test_predict_odd_sized_query(workspace, tmp_path):
    from sgone.pnm import load_image, save_image

    img = load_image(workspace / "d" / "images" / "c01_0001.ppm")[:, :27, :30]
    save_image(tmp_path / "q.ppm", img)
    args = predict_args(workspace, tmp_path / "o")
    args[args.index("--query") + 1] = str(tmp_path / "q.ppm")
    assert main(args) == 0
    assert read_pnm(tmp_path / "o" / "pred_mask.pgm")[0].shape == (27, 30)


def test_predict_empty_support_mask_writes_nothing(workspace, tmp_path, capsys):
    save_mask(tmp_path / "empty.pgm", np.zeros((32, 32)))
    out = tmp_path / "o"
    assert main(predict_args(workspace, out, tmp_path / "empty.pgm")) == 1
    assert "sgone: input error: empty support mask" in capsys.readouterr().err
    assert not out.exists()


def test_predict_rejects_threads(workspace, tmp_path):
    assert main(predict_args(workspace, tmp_path) + ["--threads", "2"]) == 2


def test_sim_map_rescale():
    np.testing.assert_array_equal(sim_map_to_pgm(np.array([-1.0, 0.0, 1.0, -0.996, 2.0])),
                                  [0, 128, 255, 1, 255])
