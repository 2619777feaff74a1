import json

import numpy as np
import pytest
import torch
from PIL import Image

from tcpl.checkpoint import parameter_digest
from tcpl.cli import RunManifest, main
from tcpl.trainer import initialize, load_state

from .conftest import tiny_config


def _config_file(path, **overrides):
    path.write_text(json.dumps(tiny_config(**overrides).to_dict()))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config_file(root / "cfg.json")
    assert main(["train", "--config", cfg, "--out", str(root / "run")]) == 0
    return root


def _stderr_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestTrain:
    def test_outputs(self, run):
        out = run / "run"
        assert (out / "final.pt").exists() and (out / "train_log.jsonl").exists()
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["epochs"] == 3 and metrics["n_projected"] == 6
        assert "target_accuracy" in metrics

    def test_manifest(self, run):
        doc = json.loads((run / "run" / "manifest.json").read_text())
        assert doc["status"] == "ok" and doc["command"] == "train"
        assert doc["config"]["epochs"] == 3
        assert "final.pt" in doc["artifacts"] and "metrics.json" in doc["artifacts"]
        assert RunManifest.verify(run / "run") == []

    def test_manifest_detects_tampering(self, run, tmp_path):
        out = tmp_path / "m"
        out.mkdir()
        (out / "a.txt").write_text("x")
        RunManifest(out, "eval", []).finish()
        assert RunManifest.verify(out) == []
        (out / "a.txt").write_text("y")
        assert RunManifest.verify(out) == ["a.txt"]

    def test_invalid_threshold(self, tmp_path, capsys):
        cfg = _config_file(tmp_path / "cfg.json")
        code = main(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--set", "thresholds.V=1.5"])
        assert code == 2
        err = _stderr_json(capsys)
        assert err["field"] == "thresholds.V" and "1.5" in err["message"]

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 2
        assert _stderr_json(capsys)["field"] == "config"

    def test_zero_epochs(self, tmp_path):
        cfg = _config_file(tmp_path / "cfg.json")
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--epochs", "0"]) == 0
        assert [p.name for p in (tmp_path / "o" / "checkpoints").iterdir()] == ["epoch_0000.pt"]
        state, _ = load_state(tmp_path / "o" / "final.pt")
        assert state.epoch == 0
        assert parameter_digest(state.model) == parameter_digest(initialize(tiny_config(), 3).model)

    def test_seed_flag(self, tmp_path):
        cfg = _config_file(tmp_path / "cfg.json")
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--epochs", "0", "--seed", "7"]) == 0
        assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 7


class TestExplain:
    def test_artifacts_and_determinism(self, run, tmp_path):
        ckpt = str(run / "run" / "final.pt")
        for name in ("a", "b"):
            assert main(["explain", "--checkpoint", ckpt, "--image", "tgt-00002", "--out", str(tmp_path / name)]) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "trace.json").read_bytes() == (b / "trace.json").read_bytes()
        trace = json.loads((a / "trace.json").read_text())
        pred = trace["predicted"]
        own = [2 * pred, 2 * pred + 1]
        names = {p.name for p in a.iterdir()}
        for j in own:
            assert {f"activation_{j}.png", f"prototype_{j}_card.png"} <= names
        assert {"box_overlay.png", "report.txt", "manifest.json"} <= names
        report = (a / "report.txt").read_text()
        assert "tgt-00002" in report and "logits" in report

    def test_image_file(self, run, tmp_path):
        rgb = (np.random.default_rng(0).uniform(size=(32, 32, 3)) * 255).astype(np.uint8)
        Image.fromarray(rgb).save(tmp_path / "q.png")
        code = main(["explain", "--checkpoint", str(run / "run" / "final.pt"),
                     "--image", str(tmp_path / "q.png"), "--out", str(tmp_path / "o")])
        assert code == 0
        assert json.loads((tmp_path / "o" / "trace.json").read_text())["sample_id"] == "q"

    def test_unknown_image(self, run, tmp_path, capsys):
        code = main(["explain", "--checkpoint", str(run / "run" / "final.pt"),
                     "--image", "no-such-id", "--out", str(tmp_path / "o")])
        assert code == 2
        assert "no-such-id" in _stderr_json(capsys)["message"]

    def test_unprojected_cards_are_flagged(self, tmp_path, caplog):
        cfg = _config_file(tmp_path / "cfg.json")
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "r"), "--epochs", "0"]) == 0
        with caplog.at_level("WARNING", logger="tcpl"):
            code = main(["explain", "--checkpoint", str(tmp_path / "r" / "final.pt"),
                         "--image", "src-00000", "--out", str(tmp_path / "o")])
        assert code == 0
        assert "never projected" in caplog.text
        cards = json.loads((tmp_path / "o" / "manifest.json").read_text())["cards"]
        assert set(cards.values()) == {"preview"}


class TestAudit:
    def test_degenerate_thresholds(self, run, tmp_path):
        """V=0 with identity views: confidence and prediction can never fail."""
        ckpt = str(run / "run" / "final.pt")
        assert main(["audit", "--checkpoint", ckpt, "--out", str(tmp_path / "a"), "--V", "0", "--identity"]) == 0
        doc = json.loads((tmp_path / "a" / "audit.json").read_text())
        s = doc["summary"]
        assert s["criterion_failures"]["confidence"] == 0 and s["criterion_failures"]["prediction"] == 0
        assert s["n_accepted"] == s["n_samples"] - s["criterion_failures"]["prototype"]
        assert len(doc["verdicts"]) == s["n_samples"] == 12

        assert main(["audit", "--checkpoint", ckpt, "--out", str(tmp_path / "b"), "--V", "0", "--identity",
                     "--set", "criteria=[confidence,prediction]"]) == 0
        assert json.loads((tmp_path / "b" / "audit.json").read_text())["summary"]["acceptance_rate"] == 1.0

    def test_monotone_in_V(self, run, tmp_path):
        ckpt = str(run / "run" / "final.pt")
        rates = []
        for v in ("0.3", "0.5", "0.9"):
            out = tmp_path / v
            assert main(["audit", "--checkpoint", ckpt, "--out", str(out), "--V", v, "--identity"]) == 0
            rates.append(json.loads((out / "audit.json").read_text())["summary"]["acceptance_rate"])
        assert rates == sorted(rates, reverse=True)

    def test_V_out_of_range(self, run, tmp_path, capsys):
        code = main(["audit", "--checkpoint", str(run / "run" / "final.pt"), "--out", str(tmp_path), "--V", "2"])
        assert code == 2 and _stderr_json(capsys)["field"] == "V"


class TestExport:
    def test_bank(self, run, tmp_path):
        assert main(["export-prototypes", "--checkpoint", str(run / "run" / "final.pt"), "--out", str(tmp_path)]) == 0
        bank = json.loads((tmp_path / "bank.json").read_text())
        rows = bank["prototypes"]
        assert [r["index"] for r in rows] == list(range(6))
        assert [r["class"] for r in rows] == [0, 0, 1, 1, 2, 2]
        assert all(r["status"] == "projected" and abs(r["cosine"] - 1) < 1e-5 for r in rows)
        assert sorted(p.name for p in tmp_path.glob("prototype_*_card.png")) == \
            [f"prototype_{j}_card.png" for j in range(6)]
        for r in rows:
            if r["domain"] == "source":
                assert r["sample_id"].startswith("src-")


class TestEval:
    def test_metrics(self, run, tmp_path):
        assert main(["eval", "--checkpoint", str(run / "run" / "final.pt"), "--out", str(tmp_path)]) == 0
        m = json.loads((tmp_path / "metrics.json").read_text())
        train_m = json.loads((run / "run" / "metrics.json").read_text())
        assert m["source_accuracy"] == train_m["source_accuracy"]
        assert m["target_accuracy"] == train_m["target_accuracy"]

    def test_foreign_checkpoint_is_runtime_error(self, tmp_path, capsys):
        torch.save({"format": "other"}, tmp_path / "x.pt")
        assert main(["eval", "--checkpoint", str(tmp_path / "x.pt"), "--out", str(tmp_path / "o")]) == 3
        assert _stderr_json(capsys)["error"] == "runtime"
