import argparse
import json
import os
import sys
from typing import Any, Dict, List, NoReturn, Optional

from pydantic import ValidationError

from dense_ba.config.env import default_workers
from dense_ba.config.logger import logger, set_log_level
from dense_ba.exceptions import (
    DivergenceError,
    IllConditionedSystemError,
    NoCovisibleKeyframeError,
)
from dense_ba.processors.eval_processor import EvalProcessor
from dense_ba.processors.experiment import load_experiment_config
from dense_ba.processors.graph_dump_processor import GraphDumpProcessor
from dense_ba.processors.run_processor import RunProcessor
from dense_ba.processors.simulate_processor import SimulateProcessor
from dense_ba.processors.sweep_processor import SweepProcessor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2

NUMERICAL_ERRORS = (IllConditionedSystemError, DivergenceError, NoCovisibleKeyframeError)


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1 (argparse uses 2, reserved here for numerical failures)."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def create_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="dense-ba",
        description="Dense bundle adjustment SLAM on synthetic scenes.",
    )
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    subparsers = parser.add_subparsers(
        dest="command", required=True, help="Command to execute"
    )

    # Parser for simulate command
    simulate_parser = subparsers.add_parser("simulate", help="Generate a synthetic scene")
    simulate_parser.add_argument("--config", default=None, help="Experiment config (JSON)")
    simulate_parser.add_argument("--out", required=True, help="Scene file to write")
    simulate_parser.add_argument("--frames", type=int, default=None, help="Number of frames")
    simulate_parser.add_argument("--seed", type=int, default=None, help="Scene seed")
    simulate_parser.add_argument("--flow-min", type=float, default=None, help="Minimum consecutive flow (px)")
    simulate_parser.add_argument("--flow-max", type=float, default=None, help="Maximum consecutive flow (px)")
    simulate_parser.add_argument(
        "--trajectory", choices=["random_walk", "loop"], default=None, help="Trajectory shape"
    )

    # Parser for run command
    run_parser = subparsers.add_parser("run", help="Run SLAM on a scene file")
    run_parser.add_argument("scene", help="Scene file written by 'simulate'")
    run_parser.add_argument("--config", default=None, help="Experiment config (JSON)")
    run_parser.add_argument("--out-dir", default=None, help="Directory for results")
    run_parser.add_argument("--mode", choices=["mono", "stereo", "rgbd"], default=None)
    run_parser.add_argument("--depth-weight", type=float, default=None, help="RGB-D prior weight")
    run_parser.add_argument("--sigma", type=float, default=None, help="Oracle target noise (px)")
    run_parser.add_argument("--outlier-fraction", type=float, default=None)
    run_parser.add_argument(
        "--confidence", choices=["oracle_true", "constant", "adversarial"], default=None
    )
    run_parser.add_argument("--workers", type=int, choices=[1, 2], default=None)
    run_parser.add_argument("--oracle-seed", type=int, default=None)
    run_parser.add_argument("--graph-dump", default=None, help="Also write the final frame graph")

    # Parser for sweep command
    sweep_parser = subparsers.add_parser("sweep", help="Run one experiment per axis value")
    sweep_parser.add_argument("--config", default=None, help="Experiment config template (JSON)")
    sweep_parser.add_argument("--axis", required=True, help="Dotted config path, e.g. noise.sigma")
    sweep_parser.add_argument("--values", nargs="*", default=[], help="Values to sweep")
    sweep_parser.add_argument("--out", required=True, help="CSV file to write")
    sweep_parser.add_argument("--workers", type=int, default=None, help="Parallel experiments")

    # Parser for eval command
    eval_parser = subparsers.add_parser("eval", help="ATE between two TUM trajectories")
    eval_parser.add_argument("est", help="Estimated trajectory (TUM)")
    eval_parser.add_argument("gt", help="Ground-truth trajectory (TUM)")
    eval_parser.add_argument("--mode", choices=["se3", "sim3"], default="sim3")

    # Parser for graph-dump command
    graph_parser = subparsers.add_parser("graph-dump", help="Run SLAM and dump the frame graph")
    graph_parser.add_argument("scene", help="Scene file written by 'simulate'")
    graph_parser.add_argument("--config", default=None, help="Experiment config (JSON)")
    graph_parser.add_argument("--out", required=True, help="JSON file to write")

    return parser


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = create_parser()
    return parser.parse_args(argv)


def _print(data: Dict[str, Any]) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def process_simulate(args: argparse.Namespace) -> None:
    config = load_experiment_config(
        args.config,
        {
            "scene.frames": args.frames,
            "scene_seed": args.seed,
            "scene.flow_min": args.flow_min,
            "scene.flow_max": args.flow_max,
            "scene.trajectory": args.trajectory,
        },
    )
    _print(SimulateProcessor(config, args.out).process())


def process_run(args: argparse.Namespace) -> None:
    config = load_experiment_config(
        args.config,
        {
            "system.mode": args.mode,
            "system.depth_weight": args.depth_weight,
            "noise.sigma": args.sigma,
            "noise.outlier_fraction": args.outlier_fraction,
            "noise.confidence_fidelity": args.confidence,
            "system.workers": args.workers,
            "oracle_seed": args.oracle_seed,
        },
    )
    out_dir = args.out_dir or config.output_dir or os.path.splitext(args.scene)[0] + "_run"
    metrics = RunProcessor(args.scene, config, out_dir, args.graph_dump).process()
    _print(
        {
            "out_dir": out_dir,
            "ate_sim3": metrics.ate_sim3,
            "ate_se3": metrics.ate_se3,
            "pose_error": metrics.pose_error,
            "keyframe_count": metrics.keyframe_count,
        }
    )


def process_sweep(args: argparse.Namespace) -> None:
    config = load_experiment_config(args.config)
    workers = args.workers if args.workers is not None else default_workers()
    rows = SweepProcessor(config, args.axis, args.values, args.out, workers).process()
    logger.info(f"{sum(r.status.value == 'done' for r in rows)}/{len(rows)} runs succeeded")


def process_eval(args: argparse.Namespace) -> None:
    _print(EvalProcessor(args.est, args.gt, args.mode).process())


def process_graph_dump(args: argparse.Namespace) -> None:
    config = load_experiment_config(args.config)
    report = GraphDumpProcessor(args.scene, config, args.out).process()
    _print({"out": args.out, "keyframes": len(report["nodes"]), "edges": len(report["edges"])})


COMMANDS = {
    "simulate": process_simulate,
    "run": process_run,
    "sweep": process_sweep,
    "eval": process_eval,
    "graph-dump": process_graph_dump,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_arguments(argv)
    if args.verbose:
        set_log_level("DEBUG")

    try:
        COMMANDS[args.command](args)
    except NUMERICAL_ERRORS as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except (ValueError, KeyError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
