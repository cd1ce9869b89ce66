import json
import os

import pytest

from selinfer.cli import exit_code, load_config, main, parse_grid
from selinfer.errors import ConfigError, FormatError, InvariantError
from selinfer.engine import read_traces
from selinfer.hashing import file_digest

CONFIG = {
    "synth": {"num_fields": 6, "vocab_sizes": [500], "num_train": 6000, "num_test": 2000, "label_noise": 0.05,
              "tail_correlation": 0.9, "seed": 3},
    "model": {"buckets": 1024, "mlp_widths": [16]},
    "train": {"epochs": 1},
    "sketch": {"width": 1024, "eta": 100},
    "calibration": {"sample_size": 4000, "validation_size": 2000, "created_at": "2026-01-01T00:00:00+00:00"},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps(CONFIG))
    p = {k: str(d / v) for k, v in dict(data="data", model="model.bin", sketch="sketch.bin", profile="profile.json",
                                        traces="traces.jsonl", report="report.json").items()}
    p["cfg"], p["dir"] = str(cfg), d
    p["train"], p["test"] = os.path.join(p["data"], "train.tsv"), os.path.join(p["data"], "test.tsv")
    p["truth"] = os.path.join(p["data"], "truth.tsv")
    c = ["--config", p["cfg"], "--quiet"]
    assert main(["gen-data", *c, "--out", p["data"]]) == 0
    assert main(["train", *c, "--train", p["train"], "--out", p["model"]]) == 0
    assert main(["build-index", *c, "--train", p["train"], "--out", p["sketch"]]) == 0
    assert main(["calibrate", *c, "--model", p["model"], "--sketch", p["sketch"], "--sample", p["train"],
                 "--out", p["profile"]]) == 0
    assert main(["infer", *c, "--model", p["model"], "--sketch", p["sketch"], "--profile", p["profile"],
                 "--input", p["test"], "--out", p["traces"]]) == 0
    assert main(["eval", *c, "--traces", p["traces"], "--labels", p["test"], "--truth", p["truth"],
                 "--out", p["report"]]) == 0
    return p


def infer_args(p, out, *extra):
    return ["infer", "--config", p["cfg"], "--quiet", "--model", p["model"], "--sketch", p["sketch"],
            "--profile", p["profile"], "--input", p["test"], "--out", out, *extra]


class TestPipeline:
    def test_outputs_and_manifests(self, pipeline):
        for key in ("model", "sketch", "profile", "traces", "report"):
            assert os.path.exists(pipeline[key])
            man = json.load(open(pipeline[key] + ".manifest.json"))
            assert man["outputs"][pipeline[key]] == file_digest(pipeline[key])
            assert all(len(v) == 16 for v in man["inputs"].values())
        assert os.path.exists(os.path.join(pipeline["data"], "manifest.json"))
        rep = json.load(open(pipeline["report"]))
        assert rep["n"] == 2000 and len(rep["decile_errors"]) == 10

    def test_gen_data_deterministic(self, pipeline, tmp_path):
        assert main(["gen-data", "--config", pipeline["cfg"], "--quiet", "--out", str(tmp_path / "again")]) == 0
        for name in ("train.tsv", "test.tsv", "truth.tsv"):
            assert file_digest(tmp_path / "again" / name) == file_digest(os.path.join(pipeline["data"], name))

    def test_idempotent_commands(self, pipeline, tmp_path):
        c = ["--config", pipeline["cfg"], "--quiet"]
        m2, s2, p2 = (str(tmp_path / n) for n in ("m.bin", "s.bin", "p.json"))
        assert main(["train", *c, "--train", pipeline["train"], "--out", m2]) == 0
        assert main(["build-index", *c, "--train", pipeline["train"], "--out", s2]) == 0
        assert main(["calibrate", *c, "--model", m2, "--sketch", s2, "--sample", pipeline["train"], "--out", p2]) == 0
        assert file_digest(m2) == file_digest(pipeline["model"])
        assert file_digest(s2) == file_digest(pipeline["sketch"])
        assert file_digest(p2) == file_digest(pipeline["profile"])

    def test_workers_byte_identical(self, pipeline, tmp_path):
        out = str(tmp_path / "t4.jsonl")
        assert main(infer_args(pipeline, out, "--workers", "4")) == 0
        assert file_digest(out) == file_digest(pipeline["traces"])

    def test_inputs_not_mutated(self, pipeline, tmp_path):
        before = {k: file_digest(pipeline[k]) for k in ("model", "sketch", "profile", "test")}
        main(infer_args(pipeline, str(tmp_path / "x.jsonl")))
        assert before == {k: file_digest(pipeline[k]) for k in before}


class TestDrift:
    def test_warning_flags_every_trace(self, pipeline, tmp_path, capsys):
        out = str(tmp_path / "drift.jsonl")
        assert main(infer_args(pipeline, out, "--set", "engine.beta=0.5")) == 0
        assert "differs" in capsys.readouterr().err
        assert all("profile_drift" in t.flags for t in read_traces(out))

    def test_strict_is_error_without_output(self, pipeline, tmp_path, capsys):
        out = str(tmp_path / "strict.jsonl")
        assert main(infer_args(pipeline, out, "--set", "engine.beta=0.5", "--strict")) == 2
        err = capsys.readouterr().err
        assert err.count("hyperparams_hash") == 1 and "differs from engine config" in err
        assert not os.path.exists(out)


class TestEvalAndSweep:
    def test_base_only_vs_full_reports(self, pipeline, tmp_path):
        base = str(tmp_path / "base.jsonl")
        assert main(infer_args(pipeline, base, "--set", "engine.ablation=\"base_only\"")) == 0
        rep = str(tmp_path / "base.json")
        assert main(["eval", "--quiet", "--traces", base, "--labels", pipeline["test"], "--out", rep]) == 0
        full = json.load(open(pipeline["report"]))
        assert json.load(open(rep))["auc"] == pytest.approx(full["base_auc"], abs=1e-12)

    def _sweep(self, pipeline, out, *params):
        args = ["sweep", "--config", pipeline["cfg"], "--quiet", "--model", pipeline["model"], "--sketch",
                pipeline["sketch"], "--profile", pipeline["profile"], "--input", pipeline["test"],
                "--out-dir", out, "--sample", pipeline["train"]]
        for p in params:
            args += ["--param", p]
        return main(args)

    def test_k_max_grid(self, pipeline, tmp_path):
        out = str(tmp_path / "sweep")
        assert self._sweep(pipeline, out, "k_max=2,4,8") == 0
        summary = json.load(open(os.path.join(out, "summary.json")))
        calls = [row["mean_model_calls"] for row in summary]
        assert [row["params"]["k_max"] for row in summary] == [2, 4, 8]
        assert calls[0] < calls[1] < calls[2]

    def test_empty_grid(self, pipeline, tmp_path):
        out = str(tmp_path / "one")
        assert self._sweep(pipeline, out) == 0
        assert len(json.load(open(os.path.join(out, "summary.json")))) == 1

    def test_lambda_grid_and_recalibration(self, pipeline, tmp_path):
        out = str(tmp_path / "lam")
        assert self._sweep(pipeline, out, "lambda=20,1,5", "rho=0.3") == 0
        summary = json.load(open(os.path.join(out, "summary.json")))
        assert [row["params"]["lam"] for row in summary] == [1, 5, 20]
        assert all(os.path.exists(os.path.join(out, f"cell_{i:03d}", "report.json")) for i in range(3))
        flags = {f for i in range(3) for t in read_traces(os.path.join(out, f"cell_{i:03d}", "traces.jsonl"))
                 for f in t.flags}
        assert "profile_drift" not in flags

    def test_unknown_grid_field(self, pipeline, tmp_path):
        assert self._sweep(pipeline, str(tmp_path / "bad"), "bogus=1,2") == 1


class TestErrors:
    def test_missing_config(self, tmp_path):
        out = tmp_path / "never"
        assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(out)]) == 1
        assert not out.exists()

    def test_usage_error(self):
        with pytest.raises(SystemExit) as info:
            main(["infer"])
        assert info.value.code == 1

    def test_corrupt_model(self, pipeline, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"XXXX" + open(pipeline["model"], "rb").read()[4:])
        args = infer_args(pipeline, str(tmp_path / "o.jsonl"))
        args[args.index("--model") + 1] = str(bad)
        assert main(args) == 2

    def test_exit_code_mapping(self):
        assert exit_code(ConfigError("x")) == 1
        assert exit_code(FormatError("x")) == 2
        assert exit_code(InvariantError("x")) == 3

    def test_config_overrides(self, tmp_path):
        cfg = load_config(None, ["engine.k_max=4", "synth.vocab_sizes=[10, 20]"])
        assert cfg["engine"]["k_max"] == 4 and cfg["synth"]["vocab_sizes"] == [10, 20]
        with pytest.raises(ConfigError):
            load_config(None, ["nosection=1"])
        with pytest.raises(ConfigError):
            parse_grid(["k_max"])
