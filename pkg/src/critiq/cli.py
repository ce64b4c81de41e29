"""Command-line pipeline: ingest, train, train-blender, evaluate,
simulate, serve, latency.

Training options can come from a TOML config file ([training] and
[blender] sections mirroring the config fields); command-line flags win
over file keys.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from critiq import checkpoint as ckpt
from critiq import critiquing, data, metrics, simulate
from critiq.model import MultimodalVae, TrainingConfig, train as train_model


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _merged_config(section, overrides, base=None):
    merged = dict(base or {})
    merged.update({k: v for k, v in section.items()})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _load_dataset(path):
    return data.load_bundle(path)


def _echo_json(payload, out=None):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
        click.echo(f"wrote {out}")
    else:
        click.echo(text)


@click.group()
def main():
    """Conversational recommender pipeline."""


@main.command()
@click.option("--interactions", required=True, type=click.Path(exists=True))
@click.option("--user-keyphrases", required=True, type=click.Path(exists=True))
@click.option("--item-keyphrases", required=True, type=click.Path(exists=True))
@click.option("--threshold", default=3.5, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--ratios", default="0.6,0.2,0.2", show_default=True)
@click.option("--out", required=True, type=click.Path())
def ingest(interactions, user_keyphrases, item_keyphrases, threshold, seed, ratios, out):
    """Parse raw files into a dataset bundle directory."""
    ratios = tuple(float(x) for x in ratios.split(","))
    table = data.load_interactions(interactions, threshold)
    k_user, labels = data.load_keyphrases(user_keyphrases, table.user_ids)
    k_item, labels = data.load_keyphrases(item_keyphrases, table.item_ids, labels)
    if k_user.n_cols != len(labels):
        k_user = data.SparseBinaryMatrix(k_user.n_rows, len(labels), k_user.rows)
    dataset = data.split_dataset(table, k_user, k_item, labels, ratios, seed)
    data.save_bundle(dataset, out)
    click.echo(f"bundle written to {out}: {dataset.n_users} users, "
               f"{dataset.n_items} items, {dataset.n_keyphrases} keyphrases")


@main.command()
@click.option("--data", "data_dir", required=True, envvar="CRITIQ_DATA",
              type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--preset", type=click.Choice(["beer", "cds", "yelp", "hotel", "toy"]))
@click.option("--epochs", type=int)
@click.option("--latent-dim", type=int)
@click.option("--learning-rate", type=float)
@click.option("--batch-size", type=int)
@click.option("--seed", type=int)
@click.option("--out", required=True, type=click.Path())
def train(data_dir, config_path, preset, epochs, latent_dim, learning_rate,
          batch_size, seed, out):
    """Train the model on a bundle and write a checkpoint."""
    dataset = _load_dataset(data_dir)
    file_cfg = _load_config_file(config_path)
    base = TrainingConfig.preset(preset).to_dict() if preset else TrainingConfig().to_dict()
    merged = _merged_config(file_cfg.get("training", {}), {
        "epochs": epochs, "latent_dim": latent_dim,
        "learning_rate": learning_rate, "batch_size": batch_size, "seed": seed,
    }, base)
    config = TrainingConfig.from_dict(merged)
    model = MultimodalVae(dataset.n_items, dataset.n_keyphrases, config)
    history = train_model(model, dataset, config,
                          progress=lambda e, l: click.echo(f"epoch {e}: loss {l:.4f}"))
    ckpt.save_checkpoint(model, out, ckpt.dataset_digest(dataset))
    click.echo(f"checkpoint written to {out} (final loss {history[-1]:.4f})")


@main.command("train-blender")
@click.option("--data", "data_dir", required=True, envvar="CRITIQ_DATA",
              type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, envvar="CRITIQ_MODEL",
              type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--margin", type=float)
@click.option("--learning-rate", type=float)
@click.option("--epochs", type=int)
@click.option("--restrict-top", type=int)
@click.option("--seed", type=int)
@click.option("--out", required=True, type=click.Path())
def train_blender_cmd(data_dir, model_path, config_path, margin, learning_rate,
                      epochs, restrict_top, seed, out):
    """Fit the blend gate on synthetic critiques; appends it to the checkpoint."""
    dataset = _load_dataset(data_dir)
    model, _, _ = ckpt.load_checkpoint(model_path, ckpt.dataset_digest(dataset))
    file_cfg = _load_config_file(config_path)
    merged = _merged_config(file_cfg.get("blender", {}), {
        "margin": margin, "learning_rate": learning_rate, "epochs": epochs,
        "restrict_top": restrict_top, "seed": seed,
    })
    config = critiquing.BlenderConfig(**merged)
    digest_before = model.params_digest()
    gate, history = critiquing.train_blender(
        model, dataset, config,
        progress=lambda e, l: click.echo(f"epoch {e}: loss {l:.4f}"))
    assert model.params_digest() == digest_before, "model weights changed"
    ckpt.save_checkpoint(model, out, ckpt.dataset_digest(dataset), gate=gate)
    click.echo(f"gate appended to {out} (final loss {history[-1]:.4f})")


@main.command()
@click.option("--data", "data_dir", required=True, envvar="CRITIQ_DATA",
              type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, envvar="CRITIQ_MODEL",
              type=click.Path(exists=True))
@click.option("--split", default="test", type=click.Choice(["val", "test"]),
              show_default=True)
@click.option("--top-ns", default="5,10,20", show_default=True)
@click.option("--modalities", default="r", type=click.Choice(["r", "k", "rk"]),
              show_default=True)
@click.option("--out", type=click.Path())
def evaluate(data_dir, model_path, split, top_ns, modalities, out):
    """Ranking metrics of a checkpoint against a held-out split."""
    dataset = _load_dataset(data_dir)
    model, _, _ = ckpt.load_checkpoint(model_path, ckpt.dataset_digest(dataset))
    ns = tuple(int(x) for x in top_ns.split(","))
    result = metrics.evaluate_model(model, dataset, split, ns, modalities)
    _echo_json({"split": split, "modalities": modalities, **result.as_dict()}, out)


@main.command("simulate")
@click.option("--data", "data_dir", required=True, envvar="CRITIQ_DATA",
              type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, envvar="CRITIQ_MODEL",
              type=click.Path(exists=True))
@click.option("--strategy", default="random",
              type=click.Choice(list(simulate.STRATEGIES)), show_default=True)
@click.option("--blender", default="gate",
              type=click.Choice(list(simulate.BLENDERS)), show_default=True)
@click.option("--top-n", default=20, show_default=True, type=int)
@click.option("--pool", default="300", show_default=True,
              help="candidate pool size, or 'full'")
@click.option("--max-steps", default=10, show_default=True, type=int)
@click.option("--sessions", default=None, type=int,
              help="cap on simulated sessions (default: all test positives)")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--trace", "trace_path", type=click.Path(),
              help="optional per-session CSV trace")
@click.option("--out", type=click.Path())
def simulate_cmd(data_dir, model_path, strategy, blender, top_n, pool,
                 max_steps, sessions, seed, trace_path, out):
    """Run the critiquing user simulation and emit the JSON report."""
    dataset = _load_dataset(data_dir)
    model, gate, _ = ckpt.load_checkpoint(model_path, ckpt.dataset_digest(dataset))
    if blender == "gate" and gate is None:
        raise click.ClickException("checkpoint has no blend gate; run train-blender first")
    pool_size = None if pool == "full" else int(pool)
    config = simulate.SimulationConfig(
        strategy=strategy, top_n=top_n, max_steps=max_steps,
        pool_size=pool_size, seed=seed, blender=blender, max_sessions=sessions)
    trace = [] if trace_path else None
    report = simulate.run_simulation(model, gate, dataset, config, trace=trace)
    if trace_path:
        with open(trace_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["user", "target", "step", "critique", "target_rank"])
            writer.writerows(trace)
        click.echo(f"trace written to {trace_path}")
    _echo_json(report, out)


@main.command()
@click.option("--data", "data_dir", required=True, envvar="CRITIQ_DATA",
              type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, envvar="CRITIQ_MODEL",
              type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, envvar="CRITIQ_PORT", type=int)
@click.option("--top-n", default=20, show_default=True, type=int)
@click.option("--with-ui", is_flag=True, help="serve the web client under /ui")
@click.option("--ui-dir", default="frontend/dist", show_default=True,
              type=click.Path())
def serve(data_dir, model_path, host, port, top_n, with_ui, ui_dir):
    """Start the HTTP session service."""
    import uvicorn

    from critiq.service import ServiceState, create_app, mount_ui

    dataset = _load_dataset(data_dir)
    model, gate, _ = ckpt.load_checkpoint(model_path, ckpt.dataset_digest(dataset))
    state = ServiceState(dataset=dataset, model=model, gate=gate, top_n=top_n)
    app = create_app(state)
    if with_ui:
        mount_ui(app, ui_dir)
    uvicorn.run(app, host=host, port=port)


@main.command()
@click.option("--model", "model_path", envvar="CRITIQ_MODEL",
              type=click.Path(exists=True),
              help="checkpoint to probe; omit for a synthetic model")
@click.option("--data", "data_dir", envvar="CRITIQ_DATA", type=click.Path(exists=True))
@click.option("--latent-dim", default=300, show_default=True, type=int)
@click.option("--items", default=4000, show_default=True, type=int)
@click.option("--keyphrases", default=100, show_default=True, type=int)
@click.option("--critiques", default=1000, show_default=True, type=int)
@click.option("--out", type=click.Path())
def latency(model_path, data_dir, latent_dim, items, keyphrases, critiques, out):
    """Measure the single-critique wall time (embed + blend + decode)."""
    if model_path:
        expected = ckpt.dataset_digest(_load_dataset(data_dir)) if data_dir else None
        model, gate, _ = ckpt.load_checkpoint(model_path, expected)
        if gate is None:
            gate = critiquing.BlendGate(model.latent_dim)
    else:
        config = TrainingConfig(latent_dim=latent_dim)
        model = MultimodalVae(items, keyphrases, config)
        gate = critiquing.BlendGate(latent_dim)
    from critiq.kernels import BACKEND

    stats = simulate.latency_probe(model, gate, n_critiques=critiques)
    _echo_json({"kernel_backend": BACKEND,
                "latent_dim": model.latent_dim, "n_items": model.n_items,
                **stats}, out)


if __name__ == "__main__":
    main()
