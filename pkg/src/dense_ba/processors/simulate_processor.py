from typing import Any, Dict

from dense_ba.config.logger import logger
from dense_ba.models.config_model import ExperimentConfig
from dense_ba.slam.flow_oracle import generate_scene, save_scene
from dense_ba.utils.file_utils import file_checksum


class SimulateProcessor:
    """Generate a synthetic scene and write it to a replayable JSON file."""

    def __init__(self, config: ExperimentConfig, out_path: str):
        self.config = config
        self.out_path = out_path

    def process(self) -> Dict[str, Any]:
        scene = generate_scene(self.config.scene, self.config.scene_seed)
        path = save_scene(scene, self.out_path)
        flows = scene.consecutive_flows()
        summary = {
            "path": path,
            "frames": scene.n_frames,
            "seed": scene.seed,
            "flow_min": min(flows),
            "flow_mean": sum(flows) / len(flows),
            "flow_max": max(flows),
            "band": [self.config.scene.flow_min, self.config.scene.flow_max],
            "sha256": file_checksum(path),
        }
        logger.info(
            f"Consecutive flow (px): min {summary['flow_min']:.2f}, "
            f"mean {summary['flow_mean']:.2f}, max {summary['flow_max']:.2f} "
            f"within band [{self.config.scene.flow_min}, {self.config.scene.flow_max}]"
        )
        return summary
