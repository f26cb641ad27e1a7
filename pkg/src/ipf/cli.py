"""Command-line harness.

Exit codes: 0 success, 2 input error (unreadable files, malformed records,
config violations), 3 numeric failure (non-finite values), 4 tolerance
failure (a verification run exceeded its bound).
"""

from __future__ import annotations

import dataclasses
import functools
import sys
from pathlib import Path

import click
import numpy as np

from . import fileio
from .align import (
    AlignConfig,
    alignment_grad_checks,
    init_params,
    token_budget,
    toy_fit,
)
from .errors import InputFormatError, NumericError, ToleranceError
from .pipeline import generate_scene, partition_boxes, run_pipeline, selection_filter, slice_frames
from .scoring import CATEGORIES, merge_predictions, score
from .tensor import Tensor, op_grad_checks

EXIT_CODES = """\
Exit codes:
  0  success
  2  input error (unreadable file, malformed record, config violation)
  3  numeric failure (non-finite intermediate)
  4  tolerance failure (verification exceeded its error bound)
"""

OP_TOLERANCE = 1e-6
BLOCK_TOLERANCE = 1e-4


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericError as exc:
            _fail(3, exc)
        except ToleranceError as exc:
            _fail(4, exc)
        except (InputFormatError, OSError, ValueError) as exc:
            _fail(2, exc)

    return wrapper


def _fail(code: int, exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


@click.group(epilog=EXIT_CODES)
def main():
    """Instance-prompt token compression harness for multi-shot video features."""


@main.command()
@click.option("--features", required=True, type=click.Path(), help="IPTF container of feature frames.")
@click.option("--boxes", type=click.Path(), default=None, help="Box proposal file (video-global frame indices).")
@click.option("--config", "config_path", type=click.Path(), default=None, help="Key-value run config.")
@click.option("--params", "params_path", type=click.Path(), default=None, help="Parameter checkpoint (IPTF + manifest).")
@click.option("--out", required=True, type=click.Path(), help="Output container for the aligned tokens.")
@click.option("--seed", default=0, show_default=True, help="Parameter init seed when --params is omitted.")
@click.option("--sim-threshold", type=float, default=None, help="Override the grouping similarity threshold.")
@click.option("--v-max", type=int, default=None, help="Override the instance-prompt cap V.")
@guarded
def run(features, boxes, config_path, params_path, out, seed, sim_threshold, v_max):
    """Run the full pipeline over a feature file and write aligned tokens."""
    frames = _load_frames(features)
    tokens_per_frame, d_model = frames.shape[1], frames.shape[2]
    if config_path is not None:
        config = fileio.parse_config(config_path, d_model=d_model)
    else:
        config = fileio.build_config({"patch_tokens": tokens_per_frame - 1}, d_model=d_model)
    if sim_threshold is not None:
        config = dataclasses.replace(config, sim_threshold=sim_threshold)
    if v_max is not None:
        config = dataclasses.replace(config, align=dataclasses.replace(config.align, v_max=v_max))
    if config.precision == "f32":
        frames = frames.astype(np.float32)

    stream = slice_frames(frames, config.align.frames_per_slice)
    records = fileio.read_boxes(boxes) if boxes is not None else []
    per_slice = partition_boxes(records, stream, config.align.frames_per_slice)
    if params_path is not None:
        params = fileio.load_params(params_path, config.align)
    else:
        params = init_params(config.align, seed=seed)

    result = run_pipeline(stream, per_slice, params, config)
    fileio.write_tensors(out, [result.concatenated()])

    budget = token_budget(config.align, stream.frame_count)
    lines = [
        f"frames={stream.frame_count}",
        f"slices={stream.slice_count}",
        f"tokens={budget.compressed}",
        f"tokens_per_slice={budget.per_slice}",
        "prompt_counts=" + ",".join(str(c) for c in result.prompt_counts),
    ]
    report = "\n".join(lines) + "\n"
    Path(str(out) + ".report").write_text(report)
    click.echo(report, nl=False)


def _load_frames(path) -> Tensor:
    tensors = fileio.read_tensors(path)
    if not tensors:
        raise InputFormatError(f"{path}: container holds no tensors")
    if len(tensors) == 1 and len(tensors[0].shape) == 3:
        return Tensor(tensors[0].data)
    for t in tensors:
        if len(t.shape) != 2 or t.shape != tensors[0].shape:
            raise InputFormatError(
                f"{path}: expected one 3-D tensor or 2-D per-frame tensors of one shape"
            )
    return Tensor(np.stack([t.data for t in tensors]))


@main.command()
@click.option("--identities", required=True, type=int, help="Number of planted instance identities.")
@click.option("--shots", required=True, type=int, help="Number of camera shots.")
@click.option("--frames", required=True, type=int, help="Total frame count F.")
@click.option("--noise", default=0.0, show_default=True, type=float, help="Gaussian noise sigma on planted regions.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--d-model", default=64, show_default=True, type=int)
@click.option("--patch-tokens", default=256, show_default=True, type=int)
@guarded
def synth(identities, shots, frames, noise, seed, out_dir, d_model, patch_tokens):
    """Generate a synthetic multi-shot scene: features, boxes and identity labels."""
    scene = generate_scene(identities, shots, frames, noise, seed, d_model=d_model, patch_tokens=patch_tokens)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_tensors(out / "features.iptf", [scene.frames])
    fileio.write_boxes(out / "boxes.txt", scene.boxes)
    with open(out / "labels.txt", "w") as fh:
        fh.write("# identity of each boxes.txt record, in order\n")
        fh.write("# shot_boundaries: " + " ".join(str(b) for b in scene.shot_boundaries) + "\n")
        for box, ident in zip(scene.boxes, scene.identities):
            fh.write(f"{box.frame} {ident}\n")
    click.echo(
        f"wrote {frames} frames, {len(scene.boxes)} boxes, "
        f"{identities} identities to {out}"
    )


@main.command()
@click.option("--frames", required=True, type=int, help="Total frame count F.")
@click.option("--x", "x_repeat", default=5, show_default=True, type=int, help="Per-frame anchor repeat X.")
@click.option("--v", "v_max", default=80, show_default=True, type=int, help="Instance-prompt cap V.")
@guarded
def tokenstats(frames, x_repeat, v_max):
    """Compressed vs full-projection token counts and the compression ratio."""
    config = AlignConfig(d_model=64, x_repeat=x_repeat, v_max=v_max)
    budget = token_budget(config, frames)
    click.echo(f"compressed={budget.compressed} full={budget.full_projection} ratio={budget.ratio:.4f}")


@main.command()
@click.option("--micro", is_flag=True, help="Only the alignment-block micro-config sweep.")
@click.option("--step", default=1e-5, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@guarded
def gradcheck(micro, step, seed):
    """Verify tape gradients against central finite differences."""
    failures = 0
    if not micro:
        for name, err in op_grad_checks(step=step, seed=seed).items():
            failures += _report_check(f"op {name}", err, OP_TOLERANCE)
    for name, err in alignment_grad_checks(step=step, seed=seed).items():
        failures += _report_check(f"align {name}", err, BLOCK_TOLERANCE)
    if failures:
        raise ToleranceError(f"{failures} gradient check(s) exceeded tolerance")
    click.echo("all gradient checks passed")


def _report_check(name: str, err: float, tolerance: float) -> int:
    ok = err < tolerance
    click.echo(f"{name}: max_rel_err={err:.3e} tol={tolerance:.0e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


@main.command()
@click.option("--steps", default=200, show_default=True, type=int)
@click.option("--lr", default=0.05, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@guarded
def toyfit(steps, lr, seed):
    """Gradient-descent sanity fit of the alignment block on a fixed slice."""
    result = toy_fit(steps=steps, lr=lr, seed=seed)
    click.echo(
        f"initial_loss={result.initial_loss:.6f} final_loss={result.final_loss:.6f} "
        f"reduction={result.reduction * 100.0:.1f}%"
    )


@main.command("filter")
@click.option("--trajectory", required=True, type=click.Path(), help="Track-ID log, one frame per line.")
@guarded
def filter_cmd(trajectory):
    """Count active-ID transitions and decide retain/reject."""
    log = fileio.read_trajectory(trajectory)
    decision = selection_filter(log)
    verdict = "retained" if decision.retained else "rejected"
    click.echo(f"transitions={decision.transitions} {verdict}")


@main.command("score")
@click.option("--answers", required=True, type=click.Path(), help="Ground truth: id category option per line.")
@click.option("--predictions", required=True, type=click.Path(), help="Predictions: id option per line.")
@guarded
def score_cmd(answers, predictions):
    """Per-category accuracy with macro and micro means."""
    records = merge_predictions(fileio.read_answers(answers), fileio.read_predictions(predictions))
    result = score(records)

    click.echo(f"{'category':<12} {'correct':>7} {'total':>6} {'accuracy':>9}")
    for cat in CATEGORIES:
        click.echo(
            f"{cat:<12} {result.correct[cat]:>7} {result.counts[cat]:>6} "
            f"{result.accuracy[cat] * 100.0:>8.2f}%"
        )
    click.echo(f"{'macro mean':<12} {'':>7} {'':>6} {result.macro_mean * 100.0:>8.2f}%")
    click.echo(f"{'micro mean':<12} {'':>7} {'':>6} {result.micro_mean * 100.0:>8.2f}%")
    click.echo("")
    for cat in CATEGORIES:
        click.echo(f"accuracy_{cat}={result.accuracy[cat]:.6f}")
    click.echo(f"macro_mean={result.macro_mean:.6f}")
    click.echo(f"micro_mean={result.micro_mean:.6f}")
    click.echo(f"missing={result.missing}")
    click.echo(f"total={result.total}")


if __name__ == "__main__":
    main()
