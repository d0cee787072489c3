from typing import Any, Dict

from dense_ba.config.logger import logger
from dense_ba.evaluation.eval_io import ate, load_tum, pose_error


class EvalProcessor:
    """ATE (and the summed pose error when frames match) between two TUM files."""

    def __init__(self, est_path: str, gt_path: str, mode: str = "sim3"):
        self.est_path = est_path
        self.gt_path = gt_path
        self.mode = mode

    def process(self) -> Dict[str, Any]:
        est = load_tum(self.est_path)
        gt = load_tum(self.gt_path)
        rmse, alignment = ate(est, gt, self.mode)
        result: Dict[str, Any] = {
            "mode": self.mode,
            "ate": rmse,
            "scale": alignment.scale,
            "poses_est": len(est),
            "poses_gt": len(gt),
        }
        if len(est) == len(gt):
            try:
                result["pose_error"] = pose_error(est, gt)
            except ValueError as e:
                logger.warning(f"Pose error skipped: {e}")
        logger.info(f"ATE ({self.mode}): {rmse:.6e}")
        return result
