"""Main CLI application for Py PACNN."""

import json
from enum import Enum
from pathlib import Path
from typing import NoReturn

import typer

from .core.config import Config
from .core.exceptions import PacnnError
from .core.processor import PacnnPipeline
from .utils.logging import setup_logging

app = typer.Typer(
    name="py-pacnn",
    help="Perspective-aware crowd counting: synthetic data, GT maps, training and evaluation",
    add_completion=False,
)

CONFIG_OPTION = typer.Option(None, "--config", "-c", help="Path to a YAML or key=value configuration file")
VERBOSE_OPTION = typer.Option(False, "--verbose", "-v", help="Enable verbose logging")


class CombineMode(str, Enum):
    PA = "pa"
    AVERAGE = "average"


class DensityOutput(str, Enum):
    D_E = "d_e"
    D_E1 = "d_e1"
    D_E2 = "d_e2"
    D_E3 = "d_e3"


def _bootstrap(config_file: Path | None, verbose: bool, seed: int | None = None) -> PacnnPipeline:
    """Set up logging, load the configuration and apply the --seed override."""
    config = Config.from_file(config_file) if config_file else Config()
    setup_logging(verbose=verbose, log_file=config.logging.file, level=config.logging.level)
    if seed is not None:
        config.train.seed = seed
        config.perspective.fit.seed = seed
    return PacnnPipeline(config)


def _fail(error: Exception) -> NoReturn:
    typer.echo(f"Error: {error}", err=True)
    raise typer.Exit(1) from error


@app.command("gen-data")
def gen_data(
    out_dir: Path = typer.Argument(..., help="Output directory (train/ and test/ are created inside)"),
    n_train: int = typer.Option(200, "--n-train", min=0, help="Number of training scenes"),
    n_test: int = typer.Option(50, "--n-test", min=0, help="Number of test scenes"),
    seed: int = typer.Option(0, "--seed", help="Root seed of the generated scenes"),
    config_file: Path | None = CONFIG_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Generate synthetic crowd scenes with perspective-varying head sizes."""
    try:
        pipeline = _bootstrap(config_file, verbose)
        counts = pipeline.generate_data(out_dir, n_train, n_test, seed)
    except (PacnnError, OSError) as e:
        _fail(e)
    typer.echo(f"Generated {counts.get('train', 0)} train and {counts.get('test', 0)} test scenes in {out_dir}")


@app.command("gen-gt")
def gen_gt(
    dataset_dir: Path = typer.Argument(..., help="Dataset directory containing scenes.jsonl"),
    seed: int | None = typer.Option(None, "--seed", help="Seed for the perspective-fit restarts"),
    config_file: Path | None = CONFIG_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Build density and perspective GT maps for a dataset."""
    try:
        pipeline = _bootstrap(config_file, verbose, seed)
        summary = pipeline.generate_ground_truth(dataset_dir)
    except (PacnnError, OSError) as e:
        _fail(e)
    typer.echo(f"Ground truth for {summary['n_scenes']} scenes (perspective max {summary['perspective_max']})")


@app.command("fit-perspective")
def fit_perspective(
    annotations: Path = typer.Argument(..., help="Annotation file (scenes.jsonl)"),
    out_dir: Path = typer.Option(Path("perspective"), "--out", "-o", help="Directory for perspective map files"),
    seed: int | None = typer.Option(None, "--seed", help="Seed for the perspective-fit restarts"),
    config_file: Path | None = CONFIG_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Fit perspective profiles from head annotations and write perspective maps."""
    try:
        pipeline = _bootstrap(config_file, verbose, seed)
        profiles = pipeline.fit_perspective(annotations, out_dir)
    except (PacnnError, OSError) as e:
        _fail(e)
    for scene_id, profile in profiles.items():
        params = profile.to_dict()
        if params["kind"] == "tanh":
            typer.echo(
                f"{scene_id} a={params['a']:.6g} b={params['b']:.6g} c={params['c']:.6g} "
                f"residual_rms={params['residual_rms']:.6g}"
            )
        else:
            typer.echo(
                f"{scene_id} slope={params['slope']:.6g} intercept={params['intercept']:.6g} "
                f"residual_rms={params['residual_rms']:.6g}"
            )


@app.command()
def train(
    dataset_dir: Path = typer.Argument(..., help="Training dataset directory (after gen-gt)"),
    out_dir: Path = typer.Option(Path("runs"), "--out", "-o", help="Directory for checkpoints and the training log"),
    seed: int | None = typer.Option(None, "--seed", help="Seed for initialization, crops and shuffling"),
    config_file: Path | None = CONFIG_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Run phase 1 (average combination) and phase 2 (PA fine-tuning)."""
    try:
        pipeline = _bootstrap(config_file, verbose, seed)
        result = pipeline.train(dataset_dir, out_dir)
    except (PacnnError, OSError) as e:
        _fail(e)
    typer.echo(f"Final loss: {result.phase2.final.total:.6g}")
    typer.echo(f"Checkpoint: {out_dir / 'model.pacp'} ({result.checkpoint_id})")


@app.command("eval")
def eval_command(
    checkpoint: Path = typer.Argument(..., help="PACP checkpoint"),
    dataset_dir: Path = typer.Argument(..., help="Dataset directory to evaluate on"),
    mode: CombineMode | None = typer.Option(None, "--mode", help="Combination mode"),
    output: DensityOutput | None = typer.Option(None, "--output", help="Density output to count"),
    per_scene: Path | None = typer.Option(None, "--per-scene", help="Write per-scene counts (.csv or .jsonl)"),
    config_file: Path | None = CONFIG_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Evaluate MAE and MSE (root-mean-square count error) on a dataset."""
    try:
        pipeline = _bootstrap(config_file, verbose)
        if mode is not None:
            pipeline.config.eval.mode = mode.value
        if output is not None:
            pipeline.config.eval.output = output.value
        metrics = pipeline.evaluate(checkpoint, dataset_dir, per_scene)
    except (PacnnError, OSError) as e:
        _fail(e)
    typer.echo(f"MAE: {metrics.mae:.6f}")
    typer.echo(f"MSE: {metrics.mse:.6f}")
    typer.echo(json.dumps({"mae": metrics.mae, "mse": metrics.mse, "n": metrics.n}))


@app.command()
def predict(
    checkpoint: Path = typer.Argument(..., help="PACP checkpoint"),
    image: Path = typer.Argument(..., help="Single-channel image as a PACM map"),
    out: Path | None = typer.Option(None, "--out", "-o", help="Write the density map (PACM)"),
    weights_out: Path | None = typer.Option(None, "--weights-out", help="Write the final PA weight map (PACM)"),
    config_file: Path | None = CONFIG_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Predict the crowd count of one image."""
    try:
        pipeline = _bootstrap(config_file, verbose)
        count = pipeline.predict(checkpoint, image, out, weights_out)
    except (PacnnError, OSError) as e:
        _fail(e)
    typer.echo(f"Count: {count:.4f}")


@app.command("export-heatmap")
def export_heatmap(
    map_file: Path = typer.Argument(..., help="PACM map (density, perspective or weight)"),
    out: Path = typer.Argument(..., help="Output PGM file"),
    config_file: Path | None = CONFIG_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Export a map as an 8-bit PGM heatmap."""
    try:
        pipeline = _bootstrap(config_file, verbose)
        pipeline.export_heatmap(map_file, out)
    except (PacnnError, OSError) as e:
        _fail(e)
    typer.echo(f"Wrote {out}")


@app.command("grad-check")
def grad_check(
    seed: int = typer.Option(0, "--seed", help="Seed of the random check instances"),
    config_file: Path | None = CONFIG_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Run the gradient-check suite; exits 0 only if every check passes."""
    try:
        pipeline = _bootstrap(config_file, verbose)
        results = pipeline.grad_check(seed)
    except (PacnnError, OSError) as e:
        _fail(e)
    for name, report in results.items():
        typer.echo(f"{name}: {report.summary()}")
    failed = [name for name, report in results.items() if not report.passed]
    if failed:
        typer.echo(f"{len(failed)} gradient checks failed", err=True)
        raise typer.Exit(1)
    typer.echo(f"All {len(results)} gradient checks passed")


@app.command()
def ablate(
    train_dir: Path = typer.Argument(..., help="Training dataset directory (after gen-gt)"),
    test_dir: Path = typer.Argument(..., help="Test dataset directory"),
    seeds: int = typer.Option(5, "--seeds", min=1, help="Number of seeds"),
    seed: int = typer.Option(0, "--seed", help="First seed"),
    out: Path | None = typer.Option(None, "--out", "-o", help="Write the per-seed table (.csv or .jsonl)"),
    config_file: Path | None = CONFIG_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Compare the average-combination baseline with the PA model over several seeds."""
    try:
        pipeline = _bootstrap(config_file, verbose)
        table = pipeline.ablate(train_dir, test_dir, list(range(seed, seed + seeds)), out)
    except (PacnnError, OSError) as e:
        _fail(e)
    typer.echo(table[["seed", "mae_average", "mae_pa", "pa_wins"]].to_string(index=False))
    typer.echo(f"PA <= average in {int(table['pa_wins'].sum())} of {len(table)} seeds")


if __name__ == "__main__":
    app()
