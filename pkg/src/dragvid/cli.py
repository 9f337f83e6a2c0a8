"""Command-line surface: generate-data, curate, train, sample, evaluate, serve."""

from __future__ import annotations

import json
import math
from pathlib import Path

import click
import numpy as np

from . import curation, diffusion, evaluation, images, toyworld
from .denoiser import CheckpointError, load_checkpoint
from .train import make_schedule, train as run_training
from .types import Drag, DragSet, RunConfig, ValidationError, validate_drag_set


def _load_config(path) -> RunConfig:
    try:
        return RunConfig.from_json(path)
    except FileNotFoundError as exc:
        raise click.ClickException(f"config file not found: {path}") from exc
    except (ValidationError, json.JSONDecodeError, TypeError) as exc:
        raise click.ClickException(f"invalid config {path}: {exc}") from exc


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except (CheckpointError, FileNotFoundError) as exc:
        raise click.ClickException(str(exc)) from exc


@click.group()
def main():
    """Drag-conditioned toy video diffusion pipeline."""


@main.command("generate-data")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--num-scenes", default=8, show_default=True)
def generate_data(config_path, out_dir, num_scenes):
    """Write an articulated-sprite dataset with ground-truth drags."""
    config = _load_config(config_path)
    manifest = toyworld.write_dataset(out_dir, config, num_scenes)
    click.echo(
        f"wrote {len(manifest['samples'])} samples to {out_dir} "
        f"(config hash {manifest['config_hash'][:12]})"
    )


@main.command()
@click.option("--clips", "clips_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--filter-model", "filter_path", type=click.Path(exists=True))
@click.option(
    "--review",
    type=click.Choice(["none", "mock-keep", "mock-discard"]),
    default="none",
    show_default=True,
)
@click.option("--height", default=256, show_default=True)
@click.option("--width", default=256, show_default=True)
@click.option("--k-max", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
def curate(clips_dir, out_path, filter_path, review, height, width, k_max, seed):
    """Run metrics, filtering and drag sampling over a clip directory."""
    filter_model = curation.FilterModel.load(filter_path) if filter_path else None
    client = None
    if review == "mock-keep":
        client = curation.MockReviewClient(answer="No")
    elif review == "mock-discard":
        client = curation.MockReviewClient(answer="Yes")
    manifest = curation.curate_directory(
        clips_dir,
        out_path,
        filter_model=filter_model,
        review_client=client,
        rng=np.random.default_rng(seed),
        res=_resolution(height, width),
        k_max=k_max,
    )
    kept = sum(1 for c in manifest["clips"] if c["kept"])
    click.echo(f"curated {len(manifest['clips'])} clips, kept {kept}; wrote {out_path}")


def _resolution(height, width):
    from .types import Resolution

    try:
        return Resolution(height, width)
    except ValidationError as exc:
        raise click.ClickException(str(exc)) from exc


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "checkpoint_path", required=True, type=click.Path())
@click.option("--max-steps", required=True, type=int)
@click.option("--log", "log_path", type=click.Path())
def train(config_path, data_dir, checkpoint_path, max_steps, log_path):
    """Train the denoiser on a generated dataset."""
    config = _load_config(config_path)
    try:
        result = run_training(
            config, data_dir, max_steps, checkpoint_path=checkpoint_path, log_path=log_path
        )
    except (ValidationError, FileNotFoundError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(
        f"trained {result.steps} steps, final loss {result.final_loss:.4f}, "
        f"checkpoint {result.checkpoint_path}"
    )


def _read_drags_file(path, config: RunConfig) -> DragSet:
    from .server import DragPayload, build_drag_set

    try:
        with open(path) as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"cannot read drags file {path}: {exc}") from exc
    entries = payload["drags"] if isinstance(payload, dict) else payload
    try:
        return build_drag_set([DragPayload(**e) for e in entries], config)
    except ValidationError as exc:
        raise click.ClickException(str(exc)) from exc


def _write_video(out_dir: Path, video, drags: DragSet) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for n in range(video.frame_count):
        images.save_frame(out_dir / f"frame_{n:03d}.png", video.frames[n])
    with open(out_dir / "drags.json", "w") as f:
        json.dump(
            {
                "drags": [
                    {"origin": list(d.origin), "points": [list(p) for p in d.trajectory]}
                    for d in drags
                ]
            },
            f,
            indent=2,
        )


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--data", "data_dir", type=click.Path(exists=True))
@click.option("--ids", "ids_csv", help="comma-separated sample ids (default: all)")
@click.option("--reference", "reference_path", type=click.Path(exists=True))
@click.option("--drags", "drags_path", type=click.Path(exists=True))
@click.option("--steps", type=int)
@click.option("--guidance", type=float)
@click.option("--seed", default=0, show_default=True)
@click.option("--ema/--no-ema", default=True, show_default=True)
def sample(
    checkpoint_path,
    out_dir,
    data_dir,
    ids_csv,
    reference_path,
    drags_path,
    steps,
    guidance,
    seed,
    ema,
):
    """Render videos for dataset samples or a single reference and drags file."""
    state = _load_checkpoint(checkpoint_path)
    config = RunConfig(
        height=state.config.height,
        width=state.config.width,
        frame_count=state.config.frame_count,
        channels=state.config.channels,
        level_widths=state.config.level_widths,
        blocks_per_level=state.config.blocks_per_level,
        heads=state.config.heads,
        k_max=state.config.k_max,
        spatial_attention=state.config.spatial_attention,
    )
    schedule = diffusion.NoiseSchedule.cosine()
    steps = steps or 50
    guidance = guidance if guidance is not None else 5.0
    out = Path(out_dir)

    if data_dir:
        sample_ids = toyworld.list_samples(data_dir)
        if ids_csv:
            wanted = ids_csv.split(",")
            missing = [i for i in wanted if i not in sample_ids]
            if missing:
                raise click.ClickException(f"unknown sample ids: {missing}")
            sample_ids = wanted
        for sid in sample_ids:
            ds = toyworld.load_sample(data_dir, sid)
            video = diffusion.sample(
                ds.video.reference,
                ds.drags,
                state,
                steps=steps,
                w_max=guidance,
                schedule=schedule,
                seed=seed,
                use_ema=ema,
            )
            _write_video(out / sid, video, ds.drags)
        click.echo(f"sampled {len(sample_ids)} videos to {out}")
        return

    if not reference_path:
        raise click.ClickException("provide --data or --reference")
    reference = images.load_frame(reference_path)
    if reference.shape[:2] != (config.height, config.width):
        reference = images.resize_frame(reference, config.height, config.width)
    drags = (
        _read_drags_file(drags_path, config)
        if drags_path
        else DragSet(drags=(), k_max=config.k_max)
    )
    video = diffusion.sample(
        reference,
        drags,
        state,
        steps=steps,
        w_max=guidance,
        schedule=schedule,
        seed=seed,
        use_ema=ema,
    )
    _write_video(out, video, drags)
    click.echo(f"sampled 1 video to {out}")


@main.command()
@click.option("--pred", "pred_dir", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--report", "report_path", type=click.Path())
def evaluate(pred_dir, data_dir, report_path):
    """Compare generated videos in --pred against dataset ground truth."""
    from .types import Video

    pred = Path(pred_dir)
    reports = []
    for sid in toyworld.list_samples(data_dir):
        sample_pred = pred / sid
        if not sample_pred.is_dir():
            continue
        ds = toyworld.load_sample(data_dir, sid)
        frames = np.stack(
            [
                images.load_frame(sample_pred / f"frame_{n:03d}.png")
                for n in range(ds.video.frame_count)
            ]
        )
        reports.append(evaluation.evaluate_sample(Video(frames=frames), ds))
    if not reports:
        raise click.ClickException(f"no evaluated samples found under {pred_dir}")

    summary = evaluation.aggregate_reports(reports)
    header = f"{'sample':<14}{'PSNR':>9}{'SSIM':>8}{'flow(org)':>11}{'flow(fg)':>10}{'dir':>7}"
    click.echo(header)
    for r in reports:
        psnr_txt = "inf" if math.isinf(r.psnr) else f"{r.psnr:.2f}"
        click.echo(
            f"{r.sample_id:<14}{psnr_txt:>9}{r.ssim:>8.4f}"
            f"{r.flow_error_origins:>11.3f}{r.flow_error_foreground:>10.3f}"
            f"{r.direction_correct:>4}/{r.direction_total}"
        )
    click.echo(json.dumps(summary, indent=2))
    if report_path:
        with open(report_path, "w") as f:
            json.dump(
                {"samples": [r.to_dict() for r in reports], "summary": summary}, f, indent=2
            )
        click.echo(f"wrote report to {report_path}")


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path())
@click.option("--data", "data_dir", type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--queue-size", default=4, show_default=True)
def serve(checkpoint_path, config_path, data_dir, host, port, queue_size):
    """Start the HTTP generation service."""
    import uvicorn

    from .server import GenerationEngine, create_app

    state = _load_checkpoint(checkpoint_path)
    if config_path:
        config = _load_config(config_path)
    else:
        config = RunConfig(
            height=state.config.height,
            width=state.config.width,
            frame_count=state.config.frame_count,
            channels=state.config.channels,
            level_widths=state.config.level_widths,
            blocks_per_level=state.config.blocks_per_level,
            heads=state.config.heads,
            k_max=state.config.k_max,
            spatial_attention=state.config.spatial_attention,
        )
    engine = GenerationEngine(
        state=state, config=config, dataset_dir=data_dir, queue_size=queue_size
    )
    uvicorn.run(create_app(engine), host=host, port=port)


if __name__ == "__main__":
    main()
