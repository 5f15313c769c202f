"""Command-line pipeline: each subcommand end to end at desk scale."""
import contextlib
import io
import json
from pathlib import Path

import pytest

from stlgt.cli import main

TINY_CONFIG = """\
# small dims keep the pipeline test quick
d = 8
L = 6
H = 3
B = 1
K = 2
max_epochs = 2
patience = 2
batch_size = 16
seed = 0
"""


def run_cli(*argv):
    """(exit_code, stdout, stderr) for one CLI invocation."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = main(list(argv))
        except SystemExit as exc:  # argparse --help / usage errors
            code = exc.code if isinstance(exc.code, int) else 1
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run simulate -> ingest -> build-graph -> train -> predict once."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    cfg_path = root / "tiny.cfg"
    cfg_path.write_text(TINY_CONFIG)
    ckpt = root / "model.ckpt"
    steps = {}

    code, out, err = run_cli("simulate", "--windows", "140", "--delta-s", "5",
                             "--seed", "3", "--out", str(data))
    assert code == 0, err
    steps["simulate"] = json.loads(out)

    code, out, err = run_cli("ingest", "--spans", str(data / "spans.jsonl"),
                             "--metrics", str(data / "metrics.csv"),
                             "--delta-s", "5")
    assert code == 0, err
    steps["ingest"] = json.loads(out)

    code, out, err = run_cli("build-graph", "--spans", str(data / "spans.jsonl"),
                             "--metrics", str(data / "metrics.csv"),
                             "--api", "checkout", "--delta-s", "5",
                             "--out", str(root))
    assert code == 0, err
    steps["build-graph"] = json.loads(out)

    code, out, err = run_cli("train", "--features", str(root), "--graph",
                             str(root), "--config", str(cfg_path),
                             "--out", str(ckpt))
    assert code == 0, err
    steps["train"] = json.loads(out)

    code, out, err = run_cli("predict", "--ckpt", str(ckpt), "--features",
                             str(root), "--t", "139")
    assert code == 0, err
    steps["predict"] = json.loads(out)

    return root, data, cfg_path, steps


def test_simulate_outputs(pipeline):
    root, data, _, steps = pipeline
    assert (data / "spans.jsonl").exists()
    assert (data / "metrics.csv").exists()
    assert (data / "topology.json").exists()
    assert steps["simulate"]["windows"] == 140
    assert steps["simulate"]["traces"] > 0


def test_ingest_reports_counts(pipeline):
    _, _, _, steps = pipeline
    ing = steps["ingest"]
    assert ing["traces"] == steps["simulate"]["traces"]
    assert len(ing["services"]) == 6
    assert ing["api_windows"]["checkout"] == 140


def test_build_graph_artifacts(pipeline):
    root, _, _, steps = pipeline
    assert (root / "graph.json").exists()
    assert (root / "features.json").exists()
    bg = steps["build-graph"]
    assert bg["nodes"] >= 6
    assert bg["windows"] == 140


def test_train_writes_checkpoint_and_report(pipeline):
    root, _, _, steps = pipeline
    assert Path(steps["train"]["checkpoint"]).exists()
    report = Path(steps["train"]["report"])
    assert report.exists()
    assert report.read_text().startswith("epoch,train_pinball")
    assert steps["train"]["epochs_run"] >= 1


def test_predict_forecasts_horizon(pipeline):
    _, _, _, steps = pipeline
    pred = steps["predict"]
    assert pred["origin_t"] == 139
    assert len(pred["yhat_ms"]) == 3
    assert all(v > 0 for v in pred["yhat_ms"])


def test_predict_missing_history_exits_one(pipeline):
    root, _, _, steps = pipeline
    ckpt = steps["train"]["checkpoint"]
    code, _, err = run_cli("predict", "--ckpt", ckpt, "--features", str(root),
                           "--t", "100000")
    assert code == 1
    assert "error:" in err


def test_help_exits_zero():
    code, out, _ = run_cli("--help")
    assert code == 0
    assert "simulate" in out and "bench" in out


def test_unknown_subcommand_exits_one():
    code, _, err = run_cli("frobnicate")
    assert code == 1
    assert err.strip() != ""


def test_no_subcommand_exits_one():
    code, _, _ = run_cli()
    assert code == 1


def test_bad_config_exits_one(tmp_path, pipeline):
    root, _, _, _ = pipeline
    bad = tmp_path / "bad.cfg"
    bad.write_text("d 8\n")
    code, _, err = run_cli("train", "--features", str(root), "--graph",
                           str(root), "--config", str(bad),
                           "--out", str(tmp_path / "m.ckpt"))
    assert code == 1
    assert "config line 1" in err


def test_unknown_config_key_exits_one(tmp_path, pipeline):
    root, _, _, _ = pipeline
    bad = tmp_path / "bad.cfg"
    bad.write_text("depth = 8\n")
    code, _, err = run_cli("train", "--features", str(root), "--graph",
                           str(root), "--config", str(bad),
                           "--out", str(tmp_path / "m.ckpt"))
    assert code == 1
    assert "unknown config key" in err


def test_bench_cli_writes_csv(tmp_path):
    out_csv = tmp_path / "bench.csv"
    code, out, err = run_cli("bench", "--variant", "linear", "--n", "8,16",
                             "--d", "8", "--repeats", "2", "--warmup", "1",
                             "--out", str(out_csv))
    assert code == 0, err
    assert out_csv.exists()
    payload = json.loads(out.splitlines()[0])
    assert payload["variant"] == "linear"
    assert len(payload["n"]) == 2


def test_e2e_tiny_run_is_deterministic(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    outs = []
    for name in ("a", "b"):
        out_dir = tmp_path / name
        code, out, _ = run_cli("e2e", "--out", str(out_dir), "--windows", "140",
                               "--delta-s", "5", "--seed", "11",
                               "--config", str(cfg))
        assert code in (0, 2)  # tiny runs may lose to persistence
        assert (out_dir / "summary.csv").exists()
        assert (out_dir / "model.ckpt").exists()
        outs.append((code, (out_dir / "model.ckpt").read_bytes(),
                     (out_dir / "summary.csv").read_text()))
    assert outs[0] == outs[1]
