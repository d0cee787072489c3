import os
import time
from typing import Optional

from dense_ba.config.logger import logger
from dense_ba.evaluation.eval_io import save_tum
from dense_ba.exceptions import DenseBAError
from dense_ba.models.config_model import ExperimentConfig
from dense_ba.models.metrics_model import RunMetrics
from dense_ba.processors.experiment import (
    build_system,
    compute_metrics,
    ground_truth_trajectory,
    seed_frames,
)
from dense_ba.processors.graph_dump_processor import dump_graph
from dense_ba.slam.flow_oracle import load_scene
from dense_ba.utils.data_utils import save_json, save_model


class RunProcessor:
    """
    Run SLAM end to end on a scene file.

    Writes est.tum, gt.tum, metrics.json and timing.json into the output
    directory. A numerical failure leaves a failure.json with the cost
    traces gathered so far before the error propagates.
    """

    def __init__(
        self,
        scene_path: str,
        config: ExperimentConfig,
        out_dir: str,
        graph_dump: Optional[str] = None,
    ):
        self.scene_path = scene_path
        self.config = config
        self.out_dir = out_dir
        self.graph_dump = graph_dump

    def process(self) -> RunMetrics:
        scene = load_scene(self.scene_path)
        system, oracle = build_system(scene, self.config)
        frames = seed_frames(scene, self.config, oracle)

        start = time.perf_counter()
        try:
            estimate = system.run(frames)
        except DenseBAError as e:
            logger.error(f"Run failed: {e}")
            save_json(
                self.out_dir,
                "failure.json",
                {
                    "status": "failed",
                    "error": type(e).__name__,
                    "message": str(e),
                    "trace": list(getattr(e, "trace", [])),
                    "cost_traces": [
                        {"label": label, "costs": costs}
                        for label, costs in system.state.cost_traces
                    ],
                },
            )
            raise
        wall_time = time.perf_counter() - start

        metrics = compute_metrics(system, scene, self.config, estimate)
        save_tum(estimate, os.path.join(self.out_dir, "est.tum"))
        save_tum(ground_truth_trajectory(scene), os.path.join(self.out_dir, "gt.tum"))
        save_model(self.out_dir, "metrics.json", metrics)
        save_json(self.out_dir, "timing.json", {"wall_time_s": wall_time})
        if self.graph_dump:
            dump_graph(system, self.graph_dump)
        logger.info(f"Results written to {self.out_dir} in {wall_time:.1f}s")
        return metrics
