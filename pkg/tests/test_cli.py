import json
import os
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from trdyn import cli
from trdyn.errors import ConfigError
from trdyn.pipeline import RunConfig, config_from_dict, load_config
from trdyn.segmentation import read_labels_csv

ERROR_LINE = re.compile(r'^trdyn: error: code=(\d) kind=(\w+) msg=".*"$')


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def pipeline(root: Path, capsys, seed=3):
    data, fitd, ext, seg, ren = (root / n for n in ("data", "fit", "ext", "seg", "ren"))
    assert run(["generate", "--out", data, "--benchmark", "multipart", "--particles", 60, "--frames", 20,
                "--seed", seed], capsys)[0] == 0
    assert run(["fit", data, "--out", fitd, "--iterations", 40, "--batch-size", 256, "--seed", seed],
               capsys)[0] == 0
    assert run(["extrapolate", data, fitd / "field.json", "--out", ext, "--steps", 5], capsys)[0] == 0
    assert run(["segment", fitd / "field.json", data, "--out", seg, "--k", 3, "--seed", seed], capsys)[0] == 0
    assert run(["render", ext / "pred", "--out", ren, "--width", 32, "--height", 24], capsys)[0] == 0
    return data, fitd, ext, seg, ren


def strip_meta(path):
    d = json.loads(Path(path).read_text())
    d.pop("meta", None)
    return d


class TestPipeline:
    def test_end_to_end_and_determinism(self, tmp_path, capsys):
        a = pipeline(tmp_path / "a", capsys)
        b = pipeline(tmp_path / "b", capsys)
        files = ["data/traj.csv", "data/scene.json", "fit/field.json", "fit/field.csv", "ext/pred/traj.csv",
                 "seg/labels.csv", "seg/labels.ply", "ren/camera.json"]
        files += [f"ren/{p.name}" for p in sorted((tmp_path / "a" / "ren").glob("frame_*.png"))]
        assert len(files) > 8
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
        for f in ("fit/fit_report.json", "ext/eval_report.json", "seg/segment_report.json"):
            assert strip_meta(tmp_path / "a" / f) == strip_meta(tmp_path / "b" / f)
        rep = json.loads((tmp_path / "a" / "ext" / "eval_report.json").read_text())
        assert rep["horizons"] == [1, 2, 3, 4, 5] and all(r >= 0 for r in rep["rmse"])
        assert len(read_labels_csv(tmp_path / "a" / "seg" / "labels.csv")) == 60

    def test_seed_changes_outputs(self, tmp_path, capsys):
        for s in (1, 2):
            run(["generate", "--out", tmp_path / str(s), "--particles", 10, "--frames", 5, "--seed", s], capsys)
        assert (tmp_path / "1" / "traj.csv").read_bytes() != (tmp_path / "2" / "traj.csv").read_bytes()

    def test_summary_table_printed(self, tmp_path, capsys):
        run(["generate", "--out", tmp_path / "d", "--particles", 30, "--frames", 20], capsys)
        run(["fit", tmp_path / "d", "--out", tmp_path / "f", "--iterations", 5], capsys)
        code, out, _ = run(["extrapolate", tmp_path / "d", tmp_path / "f" / "field.json", "--out",
                            tmp_path / "e"], capsys)
        assert code == 0 and out.splitlines()[0].split() == ["horizon", "time", "rmse", "rot_err"]

    def test_static_scene_zero_error(self, tmp_path, capsys):
        cfg = {"scene": {"benchmark": None, "spec": {"parts": [{"shape": "box", "particle_count": 20}],
                                                     "frame_rate": 20.0}},
               "model": {"init": "zeros"}, "fit": {"iterations": 0}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        run(["generate", "--config", tmp_path / "c.json", "--out", tmp_path / "d"], capsys)
        run(["fit", tmp_path / "d", "--config", tmp_path / "c.json", "--out", tmp_path / "f"], capsys)
        code, _, _ = run(["extrapolate", tmp_path / "d", tmp_path / "f" / "field.json", "--out", tmp_path / "e",
                          "--config", tmp_path / "c.json"], capsys)
        rep = json.loads((tmp_path / "e" / "eval_report.json").read_text())
        assert code == 0 and rep["rmse"] == [0.0] * 6

    def test_continual(self, tmp_path, capsys):
        run(["generate", "--out", tmp_path / "d", "--benchmark", "piecewise", "--particles", 30], capsys)
        code, out, _ = run(["continual", tmp_path / "d", "--out", tmp_path / "c", "--iterations", 10], capsys)
        rep = json.loads((tmp_path / "c" / "continual_report.json").read_text())
        assert code == 0 and len(rep["windows"]) == 5
        assert all((tmp_path / "c" / f"window_{i}" / "field.json").exists() for i in range(5))

    def test_ablate_cell_matches_standalone(self, tmp_path, capsys):
        cfg = {"ablate": {"dt_multiples": [2], "orders": [1, 2], "modes": ["derive"],
                          "parametrizations": ["equivalent"], "supervisions": ["pairs"]},
               "fit": {"iterations": 30, "batch_size": 128}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        run(["generate", "--out", tmp_path / "d", "--particles", 30, "--frames", 30], capsys)
        code, out, _ = run(["ablate", tmp_path / "d", "--config", tmp_path / "c.json", "--out", tmp_path / "a",
                            "--seed", 5], capsys)
        assert code == 0
        cells = json.loads((tmp_path / "a" / "ablation_report.json").read_text())["cells"]
        cell = next(c for c in cells if c["cell"]["order"] == 2)
        run(["fit", tmp_path / "d", "--config", tmp_path / "c.json", "--out", tmp_path / "f", "--seed", 5], capsys)
        run(["extrapolate", tmp_path / "d", tmp_path / "f" / "field.json", "--config", tmp_path / "c.json",
             "--out", tmp_path / "e", "--seed", 5], capsys)
        rep = json.loads((tmp_path / "e" / "eval_report.json").read_text())
        assert cell["rmse"] == rep["rmse"] and cell["horizons"] == rep["horizons"]


class TestErrors:
    def test_missing_dataset(self, tmp_path, capsys):
        code, _, err = run(["fit", tmp_path / "none", "--out", tmp_path / "o"], capsys)
        m = ERROR_LINE.match(err.strip())
        assert code == 3 and m and m.group(1) == "3" and len(err.strip().splitlines()) == 1

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"fit": {"iterations": 3, "lr": 0.1}}))
        code, _, err = run(["generate", "--config", tmp_path / "c.json", "--out", tmp_path / "o"], capsys)
        assert code == 2 and "lr" in err and ERROR_LINE.match(err.strip()).group(2) == "ConfigError"

    def test_bad_json(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text("{not json")
        assert run(["generate", "--config", tmp_path / "c.json", "--out", tmp_path / "o"], capsys)[0] == 2

    def test_bad_value(self, tmp_path, capsys):
        assert run(["generate", "--out", tmp_path / "o", "--benchmark", "nope"], capsys)[0] == 2

    def test_numerical_failure(self, tmp_path, capsys):
        run(["generate", "--out", tmp_path / "d", "--particles", 30, "--frames", 20], capsys)
        (tmp_path / "c.json").write_text(json.dumps({"fit": {"learning_rate": 1e300, "precondition": False}}))
        with np.errstate(all="ignore"):
            code, _, err = run(["fit", tmp_path / "d", "--config", tmp_path / "c.json", "--out", tmp_path / "f",
                                "--iterations", 5], capsys)
        assert code == 4 and ERROR_LINE.match(err.strip())

    def test_checkpoint_mismatch(self, tmp_path, capsys):
        run(["generate", "--out", tmp_path / "d1", "--particles", 30, "--frames", 20], capsys)
        run(["generate", "--out", tmp_path / "d2", "--particles", 40, "--frames", 20], capsys)
        run(["fit", tmp_path / "d1", "--out", tmp_path / "f", "--iterations", 2], capsys)
        code, _, _ = run(["segment", tmp_path / "f" / "field.json", tmp_path / "d2", "--out", tmp_path / "s"], capsys)
        assert code == 3

    def test_subprocess_entry_point(self, tmp_path):
        env = {**os.environ, "TRDYN_NUM_THREADS": "1"}
        p = subprocess.run([sys.executable, "-m", "trdyn", "fit", str(tmp_path / "none"), "--out", str(tmp_path)],
                           capture_output=True, text=True, env=env)
        assert p.returncode == 3 and ERROR_LINE.match(p.stderr.strip()) and p.stdout == ""


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.fit.dt_multiple == 2 and cfg.rollout.n_steps == 14 and cfg.segment.k is None

    def test_flags_override_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"fit": {"iterations": 7, "order": 3}, "seed": 4}))
        cfg = load_config(str(tmp_path / "c.json"), {"fit.iterations": 9, "seed": None})
        assert (cfg.fit.iterations, cfg.fit.order, cfg.seed) == (9, 3, 4)

    @pytest.mark.parametrize("data", [{"bogus": 1}, {"render": {"bogus": 1}}, {"seed": "x"}, {"fit": []},
                                      {"model": {"backend": "gpu"}}, {"rollout": {"dt_multiple": 0}},
                                      {"fit": {"order": 5}}])
    def test_rejected(self, data):
        with pytest.raises(ConfigError):
            config_from_dict(data)

    def test_roundtrip(self):
        cfg = RunConfig()
        assert config_from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_thread_env(self, monkeypatch):
        monkeypatch.setenv("TRDYN_NUM_THREADS", "3")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            monkeypatch.delenv(var, raising=False)
        cli._apply_threads()
        assert os.environ["OMP_NUM_THREADS"] == "3" and os.environ["MKL_NUM_THREADS"] == "3"
