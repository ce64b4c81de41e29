import json

import pytest
from click.testing import CliRunner

from critiq import data
from critiq.cli import main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny end-to-end run: bundle -> train -> blender -> artifacts."""
    root = tmp_path_factory.mktemp("cli")
    dataset = data.generate_toy_dataset(40, 30, 10, 3, seed=2)
    bundle = root / "bundle"
    data.save_bundle(dataset, bundle)

    config = root / "toy.toml"
    config.write_text(
        "[training]\n"
        "latent_dim = 12\n"
        "epochs = 8\n"
        "batch_size = 16\n"
        "learning_rate = 1e-3\n"
        "dropout = 0.1\n"
        "seed = 3\n"
        "\n"
        "[blender]\n"
        "margin = 1.0\n"
        "epochs = 3\n"
        "restrict_top = 15\n",
        encoding="utf-8",
    )

    runner = CliRunner()
    ckpt = root / "model.ckpt"
    result = runner.invoke(main, ["train", "--data", str(bundle), "--config",
                                  str(config), "--out", str(ckpt)])
    assert result.exit_code == 0, result.output
    full = root / "full.ckpt"
    result = runner.invoke(main, ["train-blender", "--data", str(bundle),
                                  "--model", str(ckpt), "--config", str(config),
                                  "--out", str(full)])
    assert result.exit_code == 0, result.output
    return {"root": root, "bundle": bundle, "ckpt": ckpt, "full": full,
            "runner": runner, "config": config}


def test_ingest_round_trip(tmp_path):
    interactions = tmp_path / "r.tsv"
    interactions.write_text("u1\ti1\t5\nu1\ti2\t4\nu1\ti3\t5\nu2\ti1\t5\n"
                            "u2\ti3\t2\nu3\ti2\t5\nu3\ti3\t5\nu3\ti1\t4.5\n",
                            encoding="utf-8")
    user_kp = tmp_path / "uk.tsv"
    user_kp.write_text("u1\thoppy\nu2\tmalty\nu3\thoppy\n", encoding="utf-8")
    item_kp = tmp_path / "ik.tsv"
    item_kp.write_text("i1\thoppy\ni2\tmalty\ni3\tcitrus\n", encoding="utf-8")

    runner = CliRunner()
    out = tmp_path / "bundle"
    result = runner.invoke(main, ["ingest", "--interactions", str(interactions),
                                  "--user-keyphrases", str(user_kp),
                                  "--item-keyphrases", str(item_kp),
                                  "--threshold", "3.5", "--out", str(out)])
    assert result.exit_code == 0, result.output
    loaded = data.load_bundle(out)
    assert loaded.n_users == 3 and loaded.n_items == 3
    assert loaded.n_keyphrases == 3


def test_train_produces_loadable_checkpoint(pipeline):
    from critiq.checkpoint import dataset_digest, load_checkpoint

    dataset = data.load_bundle(pipeline["bundle"])
    model, gate, header = load_checkpoint(pipeline["ckpt"], dataset_digest(dataset))
    assert gate is None
    assert model.n_items == dataset.n_items


def test_train_blender_appends_gate(pipeline):
    from critiq.checkpoint import load_checkpoint

    model, gate, _ = load_checkpoint(pipeline["full"])
    assert gate is not None
    assert gate.latent_dim == model.latent_dim


def test_evaluate_reports_metrics(pipeline):
    result = pipeline["runner"].invoke(main, [
        "evaluate", "--data", str(pipeline["bundle"]),
        "--model", str(pipeline["ckpt"]), "--split", "test"])
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output)
    assert set(payload) > {"ndcg", "r_precision", "map@10", "recall@20"}
    assert 0.0 <= payload["ndcg"] <= 1.0


def test_simulate_emits_report_and_trace(pipeline):
    out = pipeline["root"] / "report.json"
    trace = pipeline["root"] / "trace.csv"
    result = pipeline["runner"].invoke(main, [
        "simulate", "--data", str(pipeline["bundle"]),
        "--model", str(pipeline["full"]), "--strategy", "diff",
        "--top-n", "10", "--pool", "20", "--sessions", "15",
        "--trace", str(trace), "--out", str(out)])
    assert result.exit_code == 0, result.output
    report = json.loads(out.read_text())
    assert report["n_sessions"] == 15
    assert 0.0 <= report["success_rate"] <= 1.0
    header = trace.read_text().splitlines()[0]
    assert header == "user,target,step,critique,target_rank"


def test_simulate_requires_gate(pipeline):
    result = pipeline["runner"].invoke(main, [
        "simulate", "--data", str(pipeline["bundle"]),
        "--model", str(pipeline["ckpt"]), "--sessions", "5"])
    assert result.exit_code != 0
    assert "train-blender" in result.output


def test_latency_synthetic_model(pipeline):
    result = pipeline["runner"].invoke(main, [
        "latency", "--latent-dim", "16", "--items", "200",
        "--keyphrases", "20", "--critiques", "40"])
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output)
    assert payload["mean_ms"] > 0
    assert payload["latent_dim"] == 16


def test_flags_override_config_file(pipeline, tmp_path):
    # config says 8 epochs; flag forces 2
    ckpt = tmp_path / "override.ckpt"
    result = pipeline["runner"].invoke(main, [
        "train", "--data", str(pipeline["bundle"]), "--config",
        str(pipeline["config"]), "--epochs", "2", "--out", str(ckpt)])
    assert result.exit_code == 0, result.output
    assert result.output.count("epoch ") == 2
