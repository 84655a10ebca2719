import csv
import json

import numpy as np
import pytest

from limtr.cli import ablation_table, main, parse_args
from limtr.dumps import PredictionRecord, read_dump, write_dump

SMALL = ["--n-points", "8", "--epochs", "1"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen", "--scenarios", "10", "--seed", "3", "--out", str(out)]) == 0
    return out


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# --- argument handling -------------------------------------------------------------------

@pytest.mark.parametrize("argv", [
    ["train", "--data", "d", "--out", "o", "--no-lidar", "--features", "range"],
    ["train", "--data", "d"],
    ["train", "--data", "d", "--out", "o", "--depth", "3"],
    ["train", "--data", "d", "--out", "o", "--frames", "5"],
    ["eval", "--data", "d"],
    ["eval", "--data", "d", "--checkpoint", "c", "--predictions", "p"],
    ["sweep", "--data", "d", "--out", "o", "--depths", "2,5"],
    ["gen", "--scenarios", "0", "--out", "o"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    err = capsys.readouterr().err
    assert any(line.startswith("error:") for line in err.splitlines())


def test_runtime_error_exits_1(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_config_file_fills_unset_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 3, "n-points": 16, "depth": 4}))
    args = parse_args(["train", "--data", "d", "--out", "o", "--epochs", "5", "--config", str(cfg)])
    assert (args.epochs, args.n_points, args.depth) == (5, 16, 4)
    cfg.write_text(json.dumps({"depth": 5}))
    with pytest.raises(SystemExit) as exc:
        parse_args(["train", "--data", "d", "--out", "o", "--config", str(cfg)])
    assert exc.value.code == 2


# --- commands --------------------------------------------------------------------------------

def test_gen_writes_bundles_and_manifest(data_dir):
    assert len([p for p in data_dir.iterdir() if p.is_dir()]) == 10
    record = json.loads((data_dir / "manifest.jsonl").read_text().splitlines()[0])
    assert record["command"] == "gen" and record["results"]["scenarios"] == 10
    assert {"config", "seed", "started", "finished", "inputs", "outputs"} <= set(record)


def test_preprocess_cache_matches_fresh_build(data_dir, tmp_path):
    assert main(["preprocess", "--data", str(data_dir), "--n-points", "8", "--out", str(tmp_path / "c.bin")]) == 0
    from limtr.dataset import attach_lidar_cache, build_dataset, load_scenarios

    fresh = build_dataset(load_scenarios(data_dir), n_points=8)
    cached = attach_lidar_cache(build_dataset(load_scenarios(data_dir), n_points=8, with_lidar=False),
                                tmp_path / "c.bin")
    assert fresh.lidar.tobytes() == cached.lidar.tobytes()
    np.testing.assert_array_equal(fresh.lidar_mask, cached.lidar_mask)


def test_train_eval_and_dump_round_trip(data_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(data_dir), "--out", str(run), *SMALL]) == 0
    for name in ("model.ckpt", "model.ckpt.json", "trace.csv", "report.json", "report.csv", "manifest.jsonl"):
        assert (run / name).is_file(), name
    trained = json.loads((run / "report.json").read_text())["overall"]

    dump = tmp_path / "pred.jsonl"
    assert main(["eval", "--checkpoint", str(run / "model.ckpt"), "--data", str(data_dir), "--dump", str(dump),
                 "--out", str(tmp_path / "ev")]) == 0
    assert json.loads((tmp_path / "ev" / "report.json").read_text())["overall"] == trained
    assert main(["eval", "--predictions", str(dump), "--data", str(data_dir), "--out", str(tmp_path / "ev2")]) == 0
    assert json.loads((tmp_path / "ev2" / "report.json").read_text())["overall"] == trained


def test_perfect_prediction_dump_scores_perfectly(data_dir, tmp_path):
    from limtr.dataset import build_dataset, load_scenarios, split_indices

    scns = load_scenarios(data_dir)
    _, va = split_indices(len(scns))
    ds = build_dataset([scns[i] for i in va], with_lidar=False)
    traj = np.zeros((len(ds), 6, 80, 7), np.float32)
    traj[:, :, :, :2] = ds.fut_xy[:, None]
    traj[:, :, :, 2:4] = 1.0
    traj[:, :, :, 5:7] = ds.fut_vel[:, None]
    # every mode is exact; the top mode outranks the rest so each target yields one clean true positive
    probs = np.tile([0.5, 0.1, 0.1, 0.1, 0.1, 0.1], (len(ds), 1))
    write_dump(tmp_path / "p.jsonl", ds.keys, ds.classes, probs, traj)
    assert main(["eval", "--predictions", str(tmp_path / "p.jsonl"), "--data", str(data_dir),
                 "--out", str(tmp_path / "ev")]) == 0
    overall = json.loads((tmp_path / "ev" / "report.json").read_text())["overall"]
    assert overall == {"minADE": 0.0, "MR": 0.0, "mAP": 1.0}


def test_sweep_rows_and_params(data_dir, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--data", str(data_dir), "--out", str(out), "--seeds", "2", *SMALL]) == 0
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 7 * 2
    assert [int(r["depth"]) for r in rows[::2]] == list(range(2, 15, 2))
    params = [int(r["params"]) for r in rows[::2]]
    assert all(a < b for a, b in zip(params, params[1:]))


def test_ablate_grid_shape(data_dir, tmp_path, capsys):
    out = tmp_path / "ab"
    assert main(["ablate", "--data", str(data_dir), "--out", str(out), "--seeds", "2", *SMALL]) == 0
    rows = read_csv(out / "ablate.csv")
    assert [(r["axis"], r["option"]) for r in rows] == [
        ("frames", "1"), ("frames", "3"), ("frames", "6"), ("frames", "11"),
        ("features", "range"), ("features", "intensity"), ("features", "elongation"), ("features", "all")]
    for r in rows:
        assert r["mAP"] == f"{float(r['mAP_mean']):.4f} ({float(r['mAP_std']):.4f})"
        assert int(r["seeds"]) == 2
    table = capsys.readouterr().out
    assert "Time steps" in table and "LiDAR features" in table


def test_ablation_table_pads_uneven_groups():
    rows = [{"axis": "frames", "option": "1", "mAP": "0.1 (0.0)", "minADE": "1.0 (0.0)"},
            {"axis": "frames", "option": "3", "mAP": "0.2 (0.0)", "minADE": "0.9 (0.0)"},
            {"axis": "features", "option": "range", "mAP": "0.3 (0.0)", "minADE": "0.8 (0.0)"}]
    lines = ablation_table(rows).splitlines()
    assert len(lines) == 3 and all(line.count("|") == 1 for line in lines)


# --- prediction dumps ------------------------------------------------------------------------

def test_dump_record_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    traj = rng.normal(size=(2, 6, 80, 7)).astype(np.float32)
    probs = rng.dirichlet(np.ones(6), 2)
    write_dump(tmp_path / "d.jsonl", [("s0", 1), ("s0", 4)], ["vehicle", "cyclist"], probs, traj)
    back = read_dump(tmp_path / "d.jsonl")
    assert [(r.scenario, r.agent, r.cls) for r in back] == [("s0", 1, "vehicle"), ("s0", 4, "cyclist")]
    assert back[1].traj.tobytes() == traj[1].tobytes()
    np.testing.assert_array_equal(back[0].probs, probs[0])


def test_dump_rejects_truncated_block(tmp_path):
    rec = json.loads(PredictionRecord("s", 0, "vehicle", np.ones(6) / 6, np.zeros((6, 80, 7))).to_json())
    rec["shape"] = [6, 81, 7]
    (tmp_path / "bad.jsonl").write_text("\n" + json.dumps(rec) + "\n")
    with pytest.raises(ValueError, match="bad.jsonl:2"):
        read_dump(tmp_path / "bad.jsonl")


# --- flag semantics -------------------------------------------------------------------------

def test_cue_strength_only_changes_the_cue(tmp_path):
    for cue in ("0", "1"):
        assert main(["gen", "--scenarios", "3", "--seed", "4", "--cue-strength", cue,
                     "--out", str(tmp_path / cue)]) == 0
    for scn in ("scn00000", "scn00001", "scn00002"):
        a, b = tmp_path / "0" / scn, tmp_path / "1" / scn
        assert (a / "tracks.bin").read_bytes() == (b / "tracks.bin").read_bytes()


def test_gen_is_stable_across_reruns(tmp_path):
    for run in ("a", "b"):
        assert main(["gen", "--scenarios", "2", "--seed", "9", "--out", str(tmp_path / run)]) == 0
    for f in sorted((tmp_path / "a" / "scn00001").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "scn00001" / f.name).read_bytes()


def test_flags_map_to_model_config():
    from limtr.cli import model_config_from
    from limtr.lidar import select_frames

    args = parse_args(["train", "--data", "d", "--out", "o", "--depth", "12", "--frames", "6"])
    cfg = model_config_from(args)
    assert cfg.encoder_config().depth_per_block == 12 and cfg.features == ("intensity",)
    assert select_frames(list(range(11)), cfg.frames) == [0, 2, 4, 6, 8, 10]
    base = model_config_from(parse_args(["train", "--data", "d", "--out", "o", "--no-lidar"]))
    assert not base.use_lidar


def test_toy_parameter_ratio_between_depth_2_and_14():
    from limtr.encoder import count_parameters
    from limtr.model import ModelConfig

    small, big = (count_parameters(ModelConfig.toy(depth=d).encoder_config()) for d in (2, 14))
    assert big / small >= 2
