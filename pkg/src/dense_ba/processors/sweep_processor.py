import csv
import io
import os
from concurrent.futures import Future, ProcessPoolExecutor
from typing import Any, Dict, List

from dense_ba.config.logger import logger
from dense_ba.evaluation.eval_io import success_auc
from dense_ba.models.config_model import ExperimentConfig
from dense_ba.models.metrics_model import RunStatus, SweepRow
from dense_ba.processors.experiment import (
    compute_metrics,
    parse_value,
    run_slam,
    with_override,
)
from dense_ba.processors.state_management_base import SweepStateBase
from dense_ba.slam.flow_oracle import generate_scene
from dense_ba.utils.file_utils import save_file

CSV_COLUMNS = [
    "axis",
    "value",
    "status",
    "ate_sim3",
    "ate_se3",
    "pose_error",
    "keyframe_count",
    "trajectory_extent",
    "message",
]

# Relative ATE (ATE / trajectory extent) at which the success-rate curve is cut.
AUC_MAX_RELATIVE_ERROR: float = 0.1


def run_sweep_point(config_json: str, axis: str, value: str) -> Dict[str, Any]:
    """One isolated experiment; failures come back as a row, never as an exception."""
    config = ExperimentConfig.model_validate_json(config_json)
    try:
        scene = generate_scene(config.scene, config.scene_seed)
        system, estimate = run_slam(scene, config)
        metrics = compute_metrics(system, scene, config, estimate)
    except Exception as e:
        logger.error(f"Sweep {axis}={value} failed: {e}")
        row = SweepRow(
            axis=axis, value=value, status=RunStatus.FAILED, message=f"{type(e).__name__}: {e}"
        )
        return row.model_dump(mode="json")
    row = SweepRow(
        axis=axis,
        value=value,
        status=RunStatus.DONE,
        ate_sim3=metrics.ate_sim3,
        ate_se3=metrics.ate_se3,
        pose_error=metrics.pose_error,
        keyframe_count=metrics.keyframe_count,
        trajectory_extent=metrics.trajectory_extent,
    )
    return row.model_dump(mode="json")


def relative_errors(rows: List[SweepRow]) -> List[float]:
    """Sim(3) ATE over trajectory extent per row; failed runs count as infinite."""
    errors = []
    for row in rows:
        if row.status == RunStatus.DONE and row.ate_sim3 is not None and row.trajectory_extent:
            errors.append(row.ate_sim3 / row.trajectory_extent)
        else:
            errors.append(float("inf"))
    return errors


def format_rows(rows: List[SweepRow]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        data = row.model_dump(mode="json")
        writer.writerow({k: "" if data[k] is None else data[k] for k in CSV_COLUMNS})
    return buffer.getvalue()


class SweepProcessor(SweepStateBase):
    """
    One SLAM run per value of a dotted config path, collected into a CSV.

    Every configuration is validated before the first run starts. Runs are
    independent; with several workers each runs in its own process and the
    rows are still written in value order.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        axis: str,
        values: List[str],
        out_path: str,
        workers: int = 1,
    ):
        if len(set(values)) != len(values):
            raise ValueError(f"sweep values must be distinct, got {values}")
        self.configs = [with_override(config, axis, parse_value(v)) for v in values]
        self.axis = axis
        self.values = list(values)
        self.out_path = out_path
        self.workers = max(1, workers)
        directory, filename = os.path.split(out_path)
        stem = os.path.splitext(filename)[0]
        super().__init__(
            processed_directory=directory,
            axis=axis,
            values=self.values,
            state_file=f"{stem}_state.json",
        )

    def _pending(self) -> List[int]:
        pending = []
        for k, value in enumerate(self.values):
            run = self.state.get_run(value)
            if run is not None and run.status == RunStatus.DONE:
                logger.warning(f"Skipping {self.axis}={value}: already done")
                continue
            pending.append(k)
        return pending

    def _record(self, value: str, result: Dict[str, Any]) -> None:
        row = SweepRow(**result)
        self.update_run_state(value, row.status, row)
        logger.info(f"Sweep {self.axis}={value}: {row.status.value}")

    def _result(self, future: Future, value: str) -> Dict[str, Any]:
        # BrokenProcessPool and pickling errors surface here.
        try:
            return future.result()
        except Exception as e:
            logger.error(f"Sweep {self.axis}={value} lost its worker: {e}")
            row = SweepRow(
                axis=self.axis,
                value=value,
                status=RunStatus.FAILED,
                message=f"{type(e).__name__}: {e}",
            )
            return row.model_dump(mode="json")

    def process(self) -> List[SweepRow]:
        pending = self._pending()
        jobs = [(self.configs[k].model_dump_json(), self.axis, self.values[k]) for k in pending]
        if self.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                futures = [pool.submit(run_sweep_point, *job) for job in jobs]
                for (_, _, value), future in zip(jobs, futures):
                    self._record(value, self._result(future, value))
        else:
            for job in jobs:
                self._record(job[2], run_sweep_point(*job))

        rows: List[SweepRow] = []
        for value in self.values:
            run = self.state.get_run(value)
            rows.append(
                run.row
                if run is not None and run.row is not None
                else SweepRow(axis=self.axis, value=value, status=RunStatus.PENDING)
            )
        directory, filename = os.path.split(self.out_path)
        save_file(directory, filename, format_rows(rows))
        logger.info(f"Sweep table with {len(rows)} rows written to {self.out_path}")
        if rows:
            logger.info(
                f"Success AUC (relative ATE <= {AUC_MAX_RELATIVE_ERROR}): "
                f"{success_auc(relative_errors(rows), AUC_MAX_RELATIVE_ERROR):.3f}"
            )
        return rows

