import csv
import json

import pytest

from citympc.cli import main
from citympc.datafile import read_dataset
from citympc.training import load_checkpoint


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Run the full CLI flow once: scene -> dataset -> short training run."""
    d = tmp_path_factory.mktemp("cliflow")
    scene_cfg = d / "scene_cfg.json"
    scene_cfg.write_text(json.dumps({"n_buildings": 6}))
    assert main(["gen-scene", "--seed", "5", "--config", str(scene_cfg),
                 "--out", str(d / "scene.json")]) == 0
    assert main(["gen-dataset", "--scene", str(d / "scene.json"),
                 "--out", str(d / "d.mpcd"), "--seed", "7",
                 "--n-tx", "3", "--rx-pitch", "60"]) == 0
    rc = main(["train", "--dataset", str(d / "d.mpcd"),
               "--out", str(d / "c.mpck"), "--seed", "0", "--steps", "3",
               "--batch", "4", "--csv", str(d / "trace.csv"),
               "--allow-diverged"])
    assert rc == 0
    return d


class TestFlow:
    def test_scene_file_contents(self, workdir):
        doc = json.loads((workdir / "scene.json").read_text())
        assert doc["seed"] == 5
        assert len(doc["buildings"]) == 6
        assert doc["config"]["n_buildings"] == 6

    def test_dataset_and_sidecar(self, workdir):
        ds = read_dataset(workdir / "d.mpcd")
        assert len(ds.records) >= 10
        sidecar = json.loads((workdir / "d.mpcd.stats.json").read_text())
        assert sidecar["report"]["n_records"] == len(ds.records)
        assert sidecar["scene_seed"] == 5 and sidecar["split_seed"] == 7

    def test_training_artifacts(self, workdir):
        state, header = load_checkpoint(workdir / "c.mpck")
        assert state.step == 3 and header["seed"] == 0
        with open(workdir / "trace.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert float(rows[0]["total"]) > 0

    def test_unconverged_run_exits_diverged(self, workdir):
        rc = main(["train", "--dataset", str(workdir / "d.mpcd"),
                   "--out", str(workdir / "c_short.mpck"), "--seed", "1",
                   "--steps", "1", "--batch", "4"])
        assert rc == 4
        # the checkpoint is still written for post-mortem inspection
        _, header = load_checkpoint(workdir / "c_short.mpck")
        assert not header["uw_verdict"]["kept"]

    def test_resume_extends_run(self, workdir):
        rc = main(["train", "--dataset", str(workdir / "d.mpcd"),
                   "--out", str(workdir / "c_resumed.mpck"),
                   "--resume", str(workdir / "c.mpck"), "--steps", "2",
                   "--allow-diverged"])
        assert rc == 0
        state, _ = load_checkpoint(workdir / "c_resumed.mpck")
        assert state.step == 5

    def test_stats_output(self, workdir, capsys):
        assert main(["stats", "--dataset", str(workdir / "d.mpcd")]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["capacity"] == 25
        assert sum(doc["splits"].values()) == doc["n_records"]

    def test_eval_outputs(self, workdir, capsys):
        out = workdir / "evalout"
        assert main(["eval", "--checkpoint", str(workdir / "c.mpck"),
                     "--dataset", str(workdir / "d.mpcd"),
                     "--out-dir", str(out), "--allow-diverged"]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert "rx_power_mae_db" in summary
        for name in ("per_link.csv", "summary.csv", "cdf_rx_power.csv",
                     "summary.json"):
            assert (out / name).exists()
        with open(out / "cdf_rx_power.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert float(rows[-1]["F"]) == 1.0

    def test_eval_refuses_diverged_checkpoint(self, workdir):
        assert main(["eval", "--checkpoint", str(workdir / "c.mpck"),
                     "--dataset", str(workdir / "d.mpcd"),
                     "--out-dir", str(workdir / "evalout2")]) == 4

    def test_generate_json(self, workdir, capsys):
        assert main(["generate", "--checkpoint", str(workdir / "c.mpck"),
                     "--dataset", str(workdir / "d.mpcd"), "--link-id", "0",
                     "--seed", "3", "--allow-diverged"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["link_id"] == 0
        if not doc["empty"]:
            assert all(len(p) == 7 for p in doc["realization"]["paths"])

    def test_transfer_matrix_csv(self, workdir, capsys):
        out = workdir / "transfer.csv"
        assert main(["transfer", "--checkpoints", str(workdir / "c.mpck"),
                     "--datasets", str(workdir / "d.mpcd"),
                     "--out", str(out), "--allow-diverged"]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1 and rows[0]["checkpoint"] == str(workdir / "c.mpck")

    def test_timeit_reports_latency(self, workdir, capsys):
        assert main(["timeit", "--checkpoint", str(workdir / "c.mpck"),
                     "--dataset", str(workdir / "d.mpcd"),
                     "--repeats", "1", "--links", "2",
                     "--allow-diverged"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["end_to_end_ms_per_link"]["mean"] > 0
        assert doc["model_forward_ms_per_link"]["mean"] > 0

    def test_powermap_csv(self, workdir, capsys):
        out = workdir / "pmap.csv"
        assert main(["powermap", "--checkpoint", str(workdir / "c.mpck"),
                     "--dataset", str(workdir / "d.mpcd"),
                     "--scene", str(workdir / "scene.json"),
                     "--tx", "250,250,60", "--pitch", "150",
                     "--out", str(out), "--allow-diverged"]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 9  # 3x3 grid at 150 m pitch over 500 m


class TestErrors:
    def test_missing_dataset_is_data_error(self, tmp_path):
        assert main(["stats", "--dataset", str(tmp_path / "nope.mpcd")]) == 3

    def test_bad_scene_json_is_data_error(self, tmp_path):
        bad = tmp_path / "scene.json"
        bad.write_text("{not json")
        assert main(["gen-dataset", "--scene", str(bad),
                     "--out", str(tmp_path / "d.mpcd")]) == 3

    def test_bad_model_config_is_config_error(self, workdir, tmp_path):
        mc = tmp_path / "mc.json"
        mc.write_text(json.dumps({"no_such_knob": 1}))
        assert main(["train", "--dataset", str(workdir / "d.mpcd"),
                     "--out", str(tmp_path / "c.mpck"),
                     "--model-config", str(mc)]) == 2
