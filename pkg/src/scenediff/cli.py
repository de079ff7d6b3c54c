"""Command-line entry point for the whole pipeline.

Stage order is enforced through the checkpoint directory: a stage refuses
to run (exit code 2, machine-readable error line on stderr) until the
checkpoints it depends on exist. All randomness is controlled by --seed.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import codecs as codecs_mod
from . import data as data_mod
from . import detector as detector_mod
from . import diffusion as diffusion_mod
from . import evaluation as evaluation_mod
from . import pipeline as pipeline_mod
from . import pretraining as pretraining_mod
from . import sg_core
from .checkpoint import CheckpointError
from .config import ConfigError, load_config_file, resolve_option, resolve_section

EXIT_FAILURE = 1
EXIT_STAGE_ORDER = 2


def _fail(stage: str, error: str, code: int = EXIT_FAILURE, **details):
    line = {"stage": stage, "error": error, **details}
    click.echo(json.dumps(line), err=True)
    sys.exit(code)


def _require_stage(stage: str, checkpoint_dir):
    missing = pipeline_mod.missing_checkpoints(checkpoint_dir, stage)
    if missing:
        _fail(
            stage,
            "missing_checkpoints",
            code=EXIT_STAGE_ORDER,
            missing=missing,
            hint="run the producing stages first",
        )


def _load_config(path):
    if path is None:
        return {}
    try:
        return load_config_file(path)
    except ConfigError as exc:
        _fail("config", str(exc))


def _write_csv(path, rows: list[dict]):
    if not rows:
        return
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _load_splits(data_root, image_size=None):
    try:
        return data_mod.load_dataset(data_root, image_size=image_size)
    except data_mod.DataError as exc:
        _fail("data", str(exc))


@click.group()
@click.version_option()
def main():
    """Scene-graph conditioned diffusion pipeline."""


@main.command("make-toy-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("-c", "--config", "config_path", type=click.Path(exists=True))
@click.option("--image-size", type=int)
@click.option("--classes", "class_count", type=int)
@click.option("--frames-per-video", type=int)
@click.option("--train-videos", type=int)
@click.option("--val-videos", type=int)
@click.option("--test-videos", type=int)
@click.option("--shapes-min", type=int)
@click.option("--shapes-max", type=int)
@click.option("--seed", type=int)
def make_toy_data(out_dir, config_path, image_size, class_count, frames_per_video,
                  train_videos, val_videos, test_videos, shapes_min, shapes_max, seed):
    """Generate the procedural toy dataset."""
    config = _load_config(config_path)
    shared = resolve_section("shared", config, class_count=class_count,
                             image_size=image_size, seed=seed)
    section = resolve_section(
        "data", config, frames_per_video=frames_per_video, train_videos=train_videos,
        val_videos=val_videos, test_videos=test_videos, shapes_min=shapes_min,
        shapes_max=shapes_max,
    )
    try:
        toy = data_mod.ToyConfig(
            image_size=shared["image_size"],
            class_count=shared["class_count"],
            shapes_per_scene=(section["shapes_min"], section["shapes_max"]),
            videos_per_split={
                "train": section["train_videos"],
                "val": section["val_videos"],
                "test": section["test_videos"],
            },
            frames_per_video=section["frames_per_video"],
            seed=shared["seed"],
        )
        summary = data_mod.generate_toy_dataset(toy, out_dir)
    except data_mod.DataError as exc:
        _fail("make-toy-data", str(exc))
    click.echo(json.dumps({"stage": "make-toy-data", **summary}))


@main.command("extract-graphs")
@click.argument("mask_dir", type=click.Path(exists=True))
@click.argument("out_dir", type=click.Path())
@click.option("--classes", "class_count", type=int, required=True)
@click.option("--exclude", "excluded", multiple=True, type=int,
              help="class ids to exclude (repeatable)")
@click.option("--min-size", type=int, default=sg_core.DEFAULT_MIN_COMPONENT_SIZE,
              show_default=True)
def extract_graphs(mask_dir, out_dir, class_count, excluded, min_size):
    """Extract a scene graph JSON per mask PNG in MASK_DIR."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for mask_path in sorted(Path(mask_dir).glob("*.png")):
        labels = data_mod.read_mask_png(mask_path)
        try:
            mask = sg_core.SegmentationMask(labels, class_count)
            graph = sg_core.extract_scene_graph(mask, set(excluded), min_size)
        except sg_core.GraphValidationError as exc:
            _fail("extract-graphs", f"{mask_path.name}: {exc}")
        name = mask_path.name
        for suffix in (".mask.png", ".png"):
            if name.endswith(suffix):
                name = name[: -len(suffix)]
                break
        (out / f"{name}.graph.json").write_text(sg_core.serialize_graph(graph))
        written += 1
    click.echo(json.dumps({"stage": "extract-graphs", "graphs": written}))


@main.command("train-codec")
@click.option("--kind", type=click.Choice(["image", "mask"]), required=True)
@click.option("--data", "data_root", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", "checkpoint_dir", required=True, type=click.Path())
@click.option("-c", "--config", "config_path", type=click.Path(exists=True))
@click.option("--epochs", type=int)
@click.option("--batch-size", type=int)
@click.option("--lr", type=float)
@click.option("--seed", type=int)
def train_codec_cmd(kind, data_root, checkpoint_dir, config_path, epochs, batch_size, lr, seed):
    """Train the image or mask VQ codec on the train split."""
    config = _load_config(config_path)
    shared = resolve_section("shared", config, seed=seed)
    section = resolve_section("codecs", config, epochs=epochs, batch_size=batch_size, lr=lr)
    splits = _load_splits(data_root)
    train = splits.get("train", [])
    if not train:
        _fail("train-codec", "empty train split")
    class_count = train[0].mask.class_count
    if kind == "image":
        arrays = np.stack([t.image for t in train])
        in_channels, downsample, label_w = 3, section["downsample_image"], 0.0
    else:
        arrays = np.stack([data_mod.mask_to_onehot(t.mask) for t in train])
        in_channels, downsample, label_w = class_count, section["downsample_mask"], 0.5
    codec_config = codecs_mod.CodecConfig(
        kind=kind,
        in_channels=in_channels,
        downsample=downsample,
        latent_channels=section["latent_channels"],
        codebook_size=section["codebook_size"],
        base_channels=section["base_channels"],
    )
    try:
        model, history = codecs_mod.train_codec(
            arrays, codec_config, epochs=section["epochs"],
            batch_size=section["batch_size"], lr=section["lr"], seed=shared["seed"],
            label_loss_weight=label_w,
        )
    except (codecs_mod.CodecError, codecs_mod.CodecDivergenceError) as exc:
        _fail("train-codec", str(exc))
    name = pipeline_mod.IMAGE_CODEC_FILE if kind == "image" else pipeline_mod.MASK_CODEC_FILE
    codecs_mod.save_codec(Path(checkpoint_dir) / name, model)
    _write_csv(
        Path(checkpoint_dir) / f"{kind}_codec_metrics.csv",
        [{"epoch": i, "train_loss": v} for i, v in enumerate(history["train_loss"])],
    )
    click.echo(json.dumps({
        "stage": "train-codec", "kind": kind,
        "final_loss": history["train_loss"][-1], "checkpoint": name,
    }))


@main.command("pretrain-local")
@click.option("--data", "data_root", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", "checkpoint_dir", required=True, type=click.Path())
@click.option("-c", "--config", "config_path", type=click.Path(exists=True))
@click.option("--epochs", type=int)
@click.option("--batch-size", type=int)
@click.option("--lr", type=float)
@click.option("--embed-dim", type=int)
@click.option("--seed", type=int)
def pretrain_local_cmd(data_root, checkpoint_dir, config_path, epochs, batch_size, lr,
                       embed_dim, seed):
    """Train the local graph encoder by masked latent reconstruction."""
    _require_stage("pretrain-local", checkpoint_dir)
    config = _load_config(config_path)
    shared = resolve_section("shared", config, seed=seed, embed_dim=embed_dim)
    section = resolve_section(
        "pretraining", config, local_epochs=epochs, batch_size=batch_size, lr=lr
    )
    splits = _load_splits(data_root)
    meta = data_mod.load_meta(data_root)
    image_codec = codecs_mod.load_codec(
        Path(checkpoint_dir) / pipeline_mod.IMAGE_CODEC_FILE
    )
    pretrain_config = pretraining_mod.LocalPretrainConfig(
        epochs=section["local_epochs"],
        batch_size=section["batch_size"],
        lr=section["lr"],
        seed=shared["seed"],
        embed_dim=shared["embed_dim"],
        hidden_dim=section["hidden_dim"],
        gnn_layers=section["gnn_layers"],
        excluded_classes=tuple(meta.get("excluded_classes", [])),
    )
    try:
        encoder, decoder, history = pretraining_mod.pretrain_local(
            splits["train"], image_codec, pretrain_config,
            val_triplets=splits.get("val") or None,
        )
    except (pretraining_mod.PretrainError, pretraining_mod.PretrainDivergenceError) as exc:
        _fail("pretrain-local", str(exc))
    from .graph_encoder import save_graph_encoder

    save_graph_encoder(
        Path(checkpoint_dir) / pipeline_mod.LOCAL_ENCODER_FILE, encoder,
        extra={"variant": "local"},
    )
    pipeline_mod.save_latent_decoder(
        Path(checkpoint_dir) / pipeline_mod.LOCAL_DECODER_FILE, decoder
    )
    _write_csv(
        Path(checkpoint_dir) / "pretrain_local_metrics.csv",
        [
            {"epoch": i, "train_loss": v,
             "val_loss": history["val_loss"][i + 1] if len(history["val_loss"]) > i + 1 else ""}
            for i, v in enumerate(history["train_loss"])
        ],
    )
    click.echo(json.dumps({
        "stage": "pretrain-local", "final_train_loss": history["train_loss"][-1],
        "val_loss": history["val_loss"][-1] if history["val_loss"] else None,
    }))


@main.command("pretrain-global")
@click.option("--data", "data_root", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", "checkpoint_dir", required=True, type=click.Path())
@click.option("-c", "--config", "config_path", type=click.Path(exists=True))
@click.option("--epochs", type=int)
@click.option("--batch-size", type=int)
@click.option("--lr", type=float)
@click.option("--embed-dim", type=int)
@click.option("--negatives", "-k", type=int)
@click.option("--seed", type=int)
def pretrain_global_cmd(data_root, checkpoint_dir, config_path, epochs, batch_size, lr,
                        embed_dim, negatives, seed):
    """Train the global graph encoder by contrastive mask alignment."""
    _require_stage("pretrain-global", checkpoint_dir)
    config = _load_config(config_path)
    shared = resolve_section("shared", config, seed=seed, embed_dim=embed_dim)
    section = resolve_section(
        "pretraining", config, global_epochs=epochs, batch_size=batch_size, lr=lr,
        negatives=negatives,
    )
    splits = _load_splits(data_root)
    mask_codec = codecs_mod.load_codec(Path(checkpoint_dir) / pipeline_mod.MASK_CODEC_FILE)
    pretrain_config = pretraining_mod.GlobalPretrainConfig(
        epochs=section["global_epochs"],
        batch_size=section["batch_size"],
        lr=section["lr"],
        seed=shared["seed"],
        embed_dim=shared["embed_dim"],
        hidden_dim=section["hidden_dim"],
        gnn_layers=section["gnn_layers"],
        negatives=section["negatives"],
    )
    try:
        encoder, projection, history = pretraining_mod.pretrain_global(
            splits["train"], mask_codec, pretrain_config,
            val_triplets=splits.get("val") or None,
        )
    except (pretraining_mod.PretrainError, pretraining_mod.PretrainDivergenceError) as exc:
        _fail("pretrain-global", str(exc))
    from .graph_encoder import save_graph_encoder

    save_graph_encoder(
        Path(checkpoint_dir) / pipeline_mod.GLOBAL_ENCODER_FILE, encoder,
        extra={"variant": "global"},
    )
    pipeline_mod.save_global_projection(
        Path(checkpoint_dir) / pipeline_mod.GLOBAL_PROJECTION_FILE, projection
    )
    _write_csv(
        Path(checkpoint_dir) / "pretrain_global_metrics.csv",
        [
            {"epoch": i, "train_loss": v,
             "val_retrieval": history["val_retrieval"][i + 1]
             if len(history["val_retrieval"]) > i + 1 else ""}
            for i, v in enumerate(history["train_loss"])
        ],
    )
    click.echo(json.dumps({
        "stage": "pretrain-global",
        "final_train_loss": history["train_loss"][-1],
        "val_retrieval": history["val_retrieval"][-1] if history["val_retrieval"] else None,
    }))


@main.command("train-diffusion")
@click.option("--data", "data_root", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", "checkpoint_dir", required=True, type=click.Path())
@click.option("-c", "--config", "config_path", type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["pixel", "latent"]))
@click.option("--epochs", type=int)
@click.option("--batch-size", type=int)
@click.option("--lr", type=float)
@click.option("--steps", "schedule_steps", type=int)
@click.option("--seed", type=int)
def train_diffusion_cmd(data_root, checkpoint_dir, config_path, mode, epochs, batch_size,
                        lr, schedule_steps, seed):
    """Train the conditional denoiser on frozen graph-encoder embeddings."""
    _require_stage("train-diffusion", checkpoint_dir)
    config = _load_config(config_path)
    shared = resolve_section("shared", config, seed=seed)
    section = resolve_section(
        "diffusion", config, mode=mode, epochs=epochs, batch_size=batch_size, lr=lr,
        steps=schedule_steps,
    )
    splits = _load_splits(data_root)
    train = splits["train"]
    root = Path(checkpoint_dir)
    from .graph_encoder import load_graph_encoder

    local_encoder = load_graph_encoder(root / pipeline_mod.LOCAL_ENCODER_FILE)
    global_encoder = load_graph_encoder(root / pipeline_mod.GLOBAL_ENCODER_FILE)
    image_codec = None
    if section["mode"] == "latent":
        codec_path = root / pipeline_mod.IMAGE_CODEC_FILE
        if not codec_path.exists():
            _fail("train-diffusion", "missing_checkpoints", code=EXIT_STAGE_ORDER,
                  missing=[pipeline_mod.IMAGE_CODEC_FILE])
        image_codec = codecs_mod.load_codec(codec_path)

    images = np.stack([t.image for t in train])
    graphs = [t.graph for t in train]
    try:
        x0, latent_scale = pipeline_mod.prepare_diffusion_targets(
            images, section["mode"], image_codec
        )
        cond = pipeline_mod.condition_vectors(graphs, local_encoder, global_encoder)
        schedule = diffusion_mod.NoiseSchedule.linear(
            steps=section["steps"], beta_start=section["beta_start"],
            beta_end=section["beta_end"],
        )
        denoiser = diffusion_mod.ConditionalDenoiser(
            diffusion_mod.DenoiserConfig(
                in_channels=x0.shape[1],
                cond_dim=cond.shape[1],
                base_channels=section["base_channels"],
            )
        )
        val = splits.get("val") or None
        val_x0 = val_cond = None
        if val:
            val_x0, _ = pipeline_mod.prepare_diffusion_targets(
                np.stack([t.image for t in val]), section["mode"], image_codec
            )
            val_cond = pipeline_mod.condition_vectors(
                [t.graph for t in val], local_encoder, global_encoder
            )
        model, ema, history = diffusion_mod.train_diffusion(
            x0, cond, denoiser, schedule,
            diffusion_mod.DiffusionTrainConfig(
                epochs=section["epochs"], batch_size=section["batch_size"],
                lr=section["lr"], ema_decay=section["ema_decay"],
                drop_prob=section["drop_prob"], seed=shared["seed"],
            ),
            val_x0=val_x0, val_cond=val_cond,
        )
    except (diffusion_mod.DiffusionError, diffusion_mod.DiffusionDivergenceError,
            CheckpointError) as exc:
        _fail("train-diffusion", str(exc))
    pipeline_mod.save_diffusion_checkpoint(
        root / pipeline_mod.DIFFUSION_FILE, model, ema, schedule,
        mode=section["mode"], sample_shape=tuple(x0.shape[1:]),
        latent_scale=latent_scale,
        train_config={"epochs": section["epochs"], "seed": shared["seed"]},
    )
    _write_csv(
        root / "diffusion_metrics.csv",
        [
            {"epoch": i, "train_loss": v,
             "val_loss": history["val_loss"][i + 1] if len(history["val_loss"]) > i + 1 else ""}
            for i, v in enumerate(history["train_loss"])
        ],
    )
    click.echo(json.dumps({
        "stage": "train-diffusion", "mode": section["mode"],
        "final_train_loss": history["train_loss"][-1],
    }))


@main.command("sample")
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", "checkpoint_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n", type=int, default=4, show_default=True)
@click.option("--omega", type=float)
@click.option("--steps", type=int, help="strided sampling steps (default: full schedule)")
@click.option("--seed", type=int)
def sample_cmd(graph_path, checkpoint_dir, out_dir, n, omega, steps, seed):
    """Generate images conditioned on a graph JSON file."""
    _require_stage("sample", checkpoint_dir)
    config = {}
    omega = resolve_option("diffusion", "omega", omega, config)
    seed = resolve_option("shared", "seed", seed, config)
    try:
        graph = sg_core.deserialize_graph(Path(graph_path).read_text())
    except sg_core.GraphParseError as exc:
        _fail("sample", f"invalid graph: {exc}", field=exc.field)
    try:
        sampler = pipeline_mod.load_pipeline(checkpoint_dir)
        images = sampler.sample(graph, n=n, omega=omega, steps=steps, seed=seed)
    except CheckpointError as exc:
        _fail("sample", str(exc), code=EXIT_STAGE_ORDER)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, image in enumerate(images):
        name = f"sample_{i:04d}.png"
        data_mod.write_image_png(out / name, image)
        files.append(name)
    metadata = {
        "seed": seed, "omega": omega, "n": n, "steps": steps,
        "model_checksum": sampler.checksum, "files": files,
    }
    (out / "metadata.json").write_text(json.dumps(metadata, indent=2))
    click.echo(json.dumps({"stage": "sample", **metadata}))


@main.command("evaluate")
@click.option("--real", "real_dir", required=True, type=click.Path(exists=True))
@click.option("--fake", "fake_dir", type=click.Path(exists=True))
@click.option("--graphs", "graphs_dir", type=click.Path(exists=True))
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--checkpoints", "checkpoint_dir", required=True, type=click.Path())
@click.option("--data", "data_root", type=click.Path(exists=True),
              help="dataset root used to train the detector when missing")
@click.option("--ablation", is_flag=True, help="run the guidance-scale ablation harness")
@click.option("--omegas", default="1,2,3,4,5", show_default=True)
@click.option("--n-per-graph", type=int, default=1, show_default=True)
@click.option("--steps", type=int)
@click.option("--seed", type=int)
def evaluate_cmd(real_dir, fake_dir, graphs_dir, report_path, checkpoint_dir, data_root,
                 ablation, omegas, n_per_graph, steps, seed):
    """Score generated images: FID, KID, diversity, round-trip coherence."""
    config = {}
    seed = resolve_option("shared", "seed", seed, config)
    root = Path(checkpoint_dir)

    codec_path = root / pipeline_mod.IMAGE_CODEC_FILE
    if not codec_path.exists():
        _fail("evaluate", "missing_checkpoints", code=EXIT_STAGE_ORDER,
              missing=[pipeline_mod.IMAGE_CODEC_FILE])
    extractor = evaluation_mod.CodecFeatureExtractor(codecs_mod.load_codec(codec_path))

    detector_path = root / pipeline_mod.DETECTOR_FILE
    if detector_path.exists():
        detector = detector_mod.load_detector(detector_path)
    elif data_root:
        splits = _load_splits(data_root)
        train = splits["train"]
        section = resolve_section("evaluation", config)
        detector, _ = detector_mod.train_detector(
            np.stack([t.image for t in train]),
            np.stack([t.mask.labels for t in train]),
            class_count=train[0].mask.class_count,
            epochs=section["detector_epochs"], seed=seed,
        )
        detector_mod.save_detector(detector_path, detector)
    else:
        _fail("evaluate", "missing_checkpoints", code=EXIT_STAGE_ORDER,
              missing=[pipeline_mod.DETECTOR_FILE],
              hint="pass --data to train the detector")

    real_images = np.stack(
        [data_mod.read_image_png(p) for p in sorted(Path(real_dir).glob("*.png"))]
    )

    try:
        if ablation:
            _require_stage("sample", checkpoint_dir)
            if not graphs_dir:
                _fail("evaluate", "ablation needs --graphs")
            graphs = [
                sg_core.deserialize_graph(p.read_text())
                for p in sorted(Path(graphs_dir).glob("*.graph.json"))
            ]
            sampler = pipeline_mod.load_pipeline(checkpoint_dir)
            report = evaluation_mod.run_omega_ablation(
                sampler, graphs, real_images, detector, extractor,
                omegas=[float(v) for v in omegas.split(",")],
                n_per_graph=n_per_graph, steps=steps, seed=seed,
                report_path=report_path,
            )
        else:
            if not fake_dir or not graphs_dir:
                _fail("evaluate", "need --fake and --graphs (or --ablation)")
            fake_paths = sorted(Path(fake_dir).glob("*.png"))
            graph_paths = sorted(Path(graphs_dir).glob("*.graph.json"))
            if len(fake_paths) != len(graph_paths):
                _fail("evaluate",
                      f"{len(fake_paths)} fake images vs {len(graph_paths)} graphs")
            fake_images = np.stack([data_mod.read_image_png(p) for p in fake_paths])
            graphs = [sg_core.deserialize_graph(p.read_text()) for p in graph_paths]
            report = evaluation_mod.evaluate_generation(
                real_images, fake_images, graphs, detector, extractor, seed=seed
            )
            Path(report_path).write_text(json.dumps(report, indent=2))
    except (evaluation_mod.EvaluationError, sg_core.GraphParseError, CheckpointError) as exc:
        _fail("evaluate", str(exc))
    click.echo(json.dumps({"stage": "evaluate", "report": str(report_path)}))


@main.command("serve")
@click.option("--checkpoints", "checkpoint_dir", required=True, type=click.Path())
@click.option("--data", "data_root", type=click.Path())
@click.option("-c", "--config", "config_path", type=click.Path(exists=True))
@click.option("--host", type=str)
@click.option("--port", type=int)
@click.option("--static-dir", type=click.Path())
def serve_cmd(checkpoint_dir, data_root, config_path, host, port, static_dir):
    """Run the HTTP generation service."""
    import uvicorn

    from .service import ServiceConfig, create_app

    config = _load_config(config_path)
    section = resolve_section("service", config, host=host, port=port)
    app = create_app(
        ServiceConfig(
            checkpoint_dir=checkpoint_dir,
            data_root=data_root,
            host=section["host"],
            port=section["port"],
            timeout_s=section["timeout_s"],
            max_batch=section["max_batch"],
            static_dir=static_dir,
        )
    )
    uvicorn.run(app, host=section["host"], port=section["port"], log_level="warning")


if __name__ == "__main__":
    main()
