import os
from typing import Any, Dict

from dense_ba.config.logger import logger
from dense_ba.models.config_model import ExperimentConfig
from dense_ba.processors.experiment import run_slam
from dense_ba.slam.flow_oracle import load_scene
from dense_ba.slam.frame_graph import build_distance_matrix
from dense_ba.slam.slam_core import SlamSystem
from dense_ba.utils.data_utils import save_json


def dump_graph(system: SlamSystem, path: str) -> Dict[str, Any]:
    """Write keyframes, edges and the flow distance matrix of the final graph."""
    graph = system.state.graph
    report = graph.to_report(build_distance_matrix(graph) if len(graph) else None)
    report["gauge"] = list(system.state.gauge)
    report["backend_edge_counts"] = list(system.state.backend_edge_counts)
    directory, filename = os.path.split(path)
    written = save_json(directory, filename, report)
    logger.info(f"Frame graph with {len(graph)} keyframes written to {written}")
    return report


class GraphDumpProcessor:
    def __init__(self, scene_path: str, config: ExperimentConfig, out_path: str):
        self.scene_path = scene_path
        self.config = config
        self.out_path = out_path

    def process(self) -> Dict[str, Any]:
        scene = load_scene(self.scene_path)
        system, _ = run_slam(scene, self.config)
        return dump_graph(system, self.out_path)
