"""Command line: ingest a catalog, serve the annotation API, train, evaluate, export.

The state directory (--state or PRODUCTNET_STATE, default ./productnet-state)
holds the normalized pool, taxonomy, label log, and per-round embedding and
checkpoint files.
"""

from __future__ import annotations

import os
import shutil

import click

from . import corpus
from .evaluation import (
    generate_simpool,
    run_ablation,
    simulate_annotation,
    write_metrics_lines,
)
from .master_model import TrainConfig
from .orchestrator import bootstrap, advance_round

DEFAULT_STATE = "productnet-state"


def resolve_state(state: str | None) -> str:
    return state or os.environ.get("PRODUCTNET_STATE") or DEFAULT_STATE


def _state_paths(state_dir):
    return {
        "pool": os.path.join(state_dir, "pool.jsonl"),
        "taxonomy": os.path.join(state_dir, "taxonomy.txt"),
        "images": os.path.join(state_dir, "images.bin"),
        "labels": os.path.join(state_dir, "labels.jsonl"),
    }


def load_state_dir(state_dir):
    paths = _state_paths(state_dir)
    pool = corpus.load_pool(paths["pool"])
    taxonomy = corpus.load_taxonomy(paths["taxonomy"])
    images = corpus.read_embeddings(paths["images"]) if os.path.exists(paths["images"]) else None
    labels = corpus.LabelStore(pool, taxonomy, path=paths["labels"])
    return pool, taxonomy, images, labels


state_option = click.option("--state", default=None, help="state directory (or PRODUCTNET_STATE)")


@click.group()
def main():
    """Human-in-the-loop product dataset curation."""


@main.command()
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--taxonomy", "taxonomy_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_path", default=None, type=click.Path(exists=True))
@state_option
def ingest(pool_path, taxonomy_path, images_path, state):
    """Validate and normalize inputs into the state directory."""
    state_dir = resolve_state(state)
    os.makedirs(state_dir, exist_ok=True)
    pool = corpus.load_pool(pool_path)
    taxonomy = corpus.load_taxonomy(taxonomy_path)
    # validate gold_leaf references up front
    for product in pool:
        if product.gold_leaf is not None and not taxonomy.has_leaf(product.gold_leaf):
            raise click.ClickException(
                f"product {product.id!r} has unknown gold_leaf {product.gold_leaf!r}"
            )
    paths = _state_paths(state_dir)
    corpus.write_pool(paths["pool"], pool)
    with open(paths["taxonomy"], "w", encoding="utf-8") as fh:
        fh.write(taxonomy.serialize())
    if images_path:
        matrix = corpus.read_embeddings(images_path)
        shutil.copyfile(images_path, paths["images"])
        shutil.copyfile(corpus.ids_sidecar(images_path), corpus.ids_sidecar(paths["images"]))
        click.echo(f"images: {len(matrix)} rows, dim {matrix.dim}")
    click.echo(
        f"ingested {len(pool)} products, {len(taxonomy.leaf_ids)} leaves into {state_dir}"
    )


@main.command()
@click.option("--port", default=8000, type=int)
@click.option("--host", default="127.0.0.1")
@state_option
def serve(port, host, state):
    """Serve the annotation API over the ingested state directory."""
    import uvicorn

    from .service import AppState, create_app

    state_dir = resolve_state(state)
    pool, taxonomy, images, labels = load_state_dir(state_dir)
    loop = bootstrap(pool, taxonomy, images, labels=labels, state_dir=state_dir)
    click.echo(f"serving {len(pool)} products on {host}:{port} (state: {state_dir})")
    uvicorn.run(create_app(AppState(loop)), host=host, port=port, log_level="info")


@main.command("train-master")
@click.option("--epochs", default=50, type=int)
@click.option("--embed-dim", default=256, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--batch-size", default=32, type=int)
@click.option("--lr", default=1e-3, type=float)
@state_option
def train_master_cmd(epochs, embed_dim, seed, batch_size, lr, state):
    """Train the master on current labels, re-embed the pool, save a checkpoint."""
    state_dir = resolve_state(state)
    pool, taxonomy, images, labels = load_state_dir(state_dir)
    loop = bootstrap(pool, taxonomy, images, labels=labels, state_dir=state_dir)
    config = TrainConfig(
        epochs=epochs, embed_dim=embed_dim, seed=seed, batch_size=batch_size, lr=lr
    )
    advance_round(loop, config)
    event = loop.events[-1]
    click.echo(
        f"round {event['round']}: {event['n_classes']} classes, "
        f"test top-1 {event['test_top1']}, checkpoint saved in {state_dir}"
    )


@main.command("eval")
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--leaves", default=8, type=int)
@click.option("--per-leaf", default=30, type=int)
@click.option("--epochs", default=20, type=int)
@click.option("--seeds", default=2, type=int)
def eval_cmd(report_path, leaves, per_leaf, epochs, seeds):
    """Run the synthetic modality ablation and write text + metric-lines reports."""
    import numpy as np

    rows_acc: dict[str, list] = {}
    last = None
    for seed in range(seeds):
        sim = generate_simpool(
            n_leaves=leaves,
            per_leaf=per_leaf,
            token_noise=0.35,
            text_blank_rate=0.12,
            missing_image_rate=0.3,
            image_noise=0.3,
            seed=seed,
        )
        config = TrainConfig(epochs=epochs, embed_dim=64, hash_dim=1 << 12, seed=seed)
        report = run_ablation(sim, config)
        last = report
        for name, row in report.rows.items():
            rows_acc.setdefault(name, []).append(row)
    mean_rows = {name: tuple(np.mean(rs, axis=0)) for name, rs in rows_acc.items()}
    last.rows = mean_rows
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(f"seed-averaged over {seeds} seeds\n")
        fh.write(last.render() + "\n")
    metrics = {}
    for line in last.to_lines():
        name, value = line.split()
        metrics[name] = float(value)
    write_metrics_lines(report_path + ".lines", metrics)
    click.echo(open(report_path).read())
    click.echo(f"wrote {report_path} and {report_path}.lines")


@main.command()
@click.option("--strategy", default="active_lr", type=str)
@click.option("--budget", default=200, type=int)
@click.option("--seeds", default=10, type=int)
@click.option("--prevalence", default=0.01, type=float)
@click.option("--per-leaf", default=100, type=int)
def simulate(strategy, budget, seeds, prevalence, per_leaf):
    """Measure annotation query efficiency for one sampling strategy."""
    sim = generate_simpool(
        n_leaves=1,
        per_leaf=per_leaf,
        prevalence=prevalence,
        token_noise=0.3,
        text_blank_rate=0.1,
        missing_image_rate=0.3,
        image_noise=0.3,
        seed=0,
    )
    result = simulate_annotation(sim, sim.leaf_ids[0], strategy, budget, n_seeds=seeds)
    click.echo(
        f"strategy={strategy} budget={budget} prevalence={prevalence}: "
        f"mean acceleration factor {result.mean_factor:.2f} "
        f"(positives found per round: {result.positives_found})"
    )


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@state_option
def export(out_dir, state):
    """Export the effective gold dataset (pool format + label sidecar)."""
    state_dir = resolve_state(state)
    pool, _taxonomy, _images, labels = load_state_dir(state_dir)
    counts = corpus.export_gold(pool, labels, out_dir)
    total_pos = sum(c["pos"] for c in counts.values())
    total_neg = sum(c["neg"] for c in counts.values())
    for leaf in sorted(counts):
        click.echo(f"{leaf}: {counts[leaf]['pos']} positive, {counts[leaf]['neg']} negative")
    click.echo(f"exported {total_pos} positives / {total_neg} negatives to {out_dir}")


if __name__ == "__main__":
    main()
