"""CLI entry point: generate synthetic sequences, run the pipeline, score trajectories."""
from __future__ import annotations

import asyncio
import dataclasses
import statistics
import sys
import time
from pathlib import Path
from typing import List, Optional

import click
from dotenv import load_dotenv

from .config import apply_thread_override, load_config_file
from .errors import ContractViolation, DatasetError, InitializationError, TrackingError
from .evaluation import body_vertices, summarize_run
from .outputs import plot_trajectories, read_trajectory, write_metrics_csv, write_trajectory
from .reporter import print_dataset_summary, print_error, print_metrics, print_run_summary
from .slam import PRESETS, SlamConfig, average_scores, evaluate_keyframes, run_pipeline, run_pipeline_async
from .splat.io import save_map, save_png
from .synth import WorldSpec, generate_sequence, load_dataset, serialize_dataset
from .trace import RunTrace, set_current_trace

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_INIT = 3
EXIT_LENGTH = 4

# whole-run checks printed next to the estimate's metric row
THRESHOLDS = {"ate_rmse_m": 0.01, "wa_mpjpe_mm": 20.0}


def _fail(err: BaseException, code: int):
    print_error(err, to_stderr=True)
    sys.exit(code)


def _missing(what: str, path: str):
    click.echo(f"error: {what} not found: {path}", err=True)
    sys.exit(EXIT_USAGE)


def _load_slam_config(path: Optional[str], seed: Optional[int], preset: Optional[str] = None) -> SlamConfig:
    data = load_config_file(path) if path else {}
    config = SlamConfig.preset(preset, data) if preset else SlamConfig.from_dict(data)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    return config


@click.group()
def main():
    """avatar-slam: monocular SLAM with a Gaussian scene and an articulated avatar"""
    load_dotenv()
    apply_thread_override()


@main.command(name="generate")
@click.argument("spec_path", metavar="SPEC")
@click.option("--out", "out_path", required=True, help="Dataset file to write")
@click.option("--seed", type=int, default=None, help="Override the spec's seed")
def generate_cmd(spec_path: str, out_path: str, seed: Optional[int]):
    if not Path(spec_path).exists():
        _missing("spec", spec_path)
    try:
        spec = WorldSpec.from_dict(load_config_file(spec_path))
        if seed is not None:
            spec = dataclasses.replace(spec, seed=seed)
        sequence = generate_sequence(spec)
        serialize_dataset(sequence, out_path)
    except (ContractViolation, DatasetError, TypeError) as err:
        _fail(err, EXIT_FAILURE)
    print_dataset_summary(out_path, len(sequence), len(sequence.truth.scene), len(sequence.truth.avatar), spec.seed)


@main.command(name="run")
@click.argument("dataset_path", metavar="DATASET")
@click.option("--config", "config_path", default=None, help="SLAM config (.py with `config = {...}` or .json)")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None, help="Start from a named preset; --config keys override it")
@click.option("--out", "out_dir", required=True, help="Output directory")
@click.option("--seed", type=int, default=None, help="Override the config's seed")
@click.option("--single-thread", "single_thread", is_flag=True, help="Interleave tracking and mapping deterministically")
def run_cmd(dataset_path: str, config_path: Optional[str], preset: Optional[str], out_dir: str, seed: Optional[int], single_thread: bool):
    if not Path(dataset_path).exists():
        _missing("dataset", dataset_path)
    if config_path and not Path(config_path).exists():
        _missing("config", config_path)
    try:
        config = _load_slam_config(config_path, seed, preset)
        sequence = load_dataset(dataset_path)
    except (ContractViolation, DatasetError, TypeError) as err:
        _fail(err, EXIT_FAILURE)

    out = Path(out_dir)
    (out / "keyframes").mkdir(parents=True, exist_ok=True)
    trace = RunTrace()
    set_current_trace(trace)
    started = time.perf_counter()
    try:
        if single_thread:
            result = run_pipeline(sequence, config, trace=trace)
        else:
            result = asyncio.run(run_pipeline_async(sequence, config, trace=trace))
    except InitializationError as err:
        trace.write_jsonl(out / "run_log.jsonl")
        click.echo(f"error: initialization failed at frame {err.frame_id}: {err}", err=True)
        sys.exit(EXIT_INIT)
    except (ContractViolation, DatasetError, TrackingError) as err:
        trace.write_jsonl(out / "run_log.jsonl")
        _fail(err, EXIT_FAILURE)
    seconds = time.perf_counter() - started

    truth = sequence.truth
    timestamps = [f.timestamp for f in sequence.frames]
    write_trajectory(out / "trajectory.txt", timestamps, result.cameras, result.poses, result.joints)
    write_trajectory(out / "trajectory_prior.txt", timestamps, result.prior_cameras, result.prior_poses, result.prior_joints)
    write_trajectory(out / "trajectory_reference.txt", timestamps, truth.cameras, truth.poses, truth.joints)

    renders = evaluate_keyframes(result, sequence, config)
    for view in renders:
        save_png(out / "keyframes" / f"kf_{view.frame:04d}.png", view.image)
        if result.map.avatar is not None:
            save_png(out / "keyframes" / f"kf_{view.frame:04d}_human.png", view.human_image)

    body = sequence.body
    ref_vertices = body_vertices(body, truth.poses)
    name = Path(dataset_path).stem
    fps = sequence.spec.fps
    rows = [
        summarize_run(
            name, result.cameras, truth.cameras, result.joints, truth.joints, fps, len(result.keyframes),
            est_vertices=body_vertices(body, result.poses), ref_vertices=ref_vertices, renders=average_scores(renders),
        ),
        summarize_run(
            f"{name}/prior", result.prior_cameras, truth.cameras, result.prior_joints, truth.joints, fps, 0,
            est_vertices=body_vertices(body, result.prior_poses), ref_vertices=ref_vertices,
        ),
    ]
    write_metrics_csv(out / "metrics.csv", rows)
    plot_trajectories(
        out / "trajectory.png", result.cameras, truth.cameras, est_root=result.joints[:, 0], ref_root=truth.joints[:, 0]
    )
    save_map(out / "map.bin", result.map.scene, result.map.avatar, result.map.field)
    trace.write_jsonl(out / "run_log.jsonl")

    flagged = sum(1 for d in result.diagnostics if d.flagged)
    print_run_summary(len(sequence), len(result.keyframes), len(trace.get_warnings()), flagged, seconds)
    print_metrics(rows[0], THRESHOLDS)


def _fps_from(timestamps: List[float]) -> float:
    steps = [b - a for a, b in zip(timestamps, timestamps[1:])]
    if not steps:
        return 30.0
    return 1.0 / statistics.median(steps)


@main.command(name="eval")
@click.argument("est_path", metavar="EST")
@click.argument("ref_path", metavar="REF")
@click.option("--out", "out_csv", required=True, help="Metrics CSV to write")
@click.option("--fps", type=float, default=None, help="Frame rate for jitter (default: from the reference timestamps)")
@click.option("--alignment", type=click.Choice(["sim3", "se3"]), default="sim3", show_default=True)
def eval_cmd(est_path: str, ref_path: str, out_csv: str, fps: Optional[float], alignment: str):
    for path in (est_path, ref_path):
        if not Path(path).exists():
            _missing("trajectory", path)
    try:
        est = read_trajectory(est_path)
        ref = read_trajectory(ref_path)
    except DatasetError as err:
        _fail(err, EXIT_FAILURE)
    if len(est) != len(ref) or est.joint_count != ref.joint_count:
        click.echo(
            f"error: trajectory length mismatch: {len(est)} frame(s) x {est.joint_count} joint(s) "
            f"vs {len(ref)} frame(s) x {ref.joint_count} joint(s)",
            err=True,
        )
        sys.exit(EXIT_LENGTH)
    try:
        row = summarize_run(
            Path(est_path).stem,
            est.cameras,
            ref.cameras,
            est.joints,
            ref.joints,
            fps or _fps_from(ref.timestamps),
            0,
            alignment=alignment,
        )
    except ContractViolation as err:
        _fail(err, EXIT_FAILURE)
    write_metrics_csv(out_csv, [row])
    print_metrics(row)


if __name__ == "__main__":
    main()
