import os
from typing import List, Optional

from pydantic import ValidationError

from dense_ba.config.logger import logger
from dense_ba.models.metrics_model import (
    RunStatus,
    SweepRow,
    SweepRunState,
    SweepStateModel,
)
from dense_ba.utils.data_utils import load_json, save_model
from dense_ba.utils.file_utils import cleanup_temp_files, ensure_directory


class SweepStateBase:
    """
    Keeps the progress of a sweep on disk so an interrupted sweep resumes.

    The state file is rewritten atomically after every run; leftovers of an
    interrupted write are removed on start.
    """

    def __init__(
        self,
        processed_directory: str,
        axis: str,
        values: List[str],
        state_file: str = "sweep_state.json",
    ):
        self.processed_directory = processed_directory or "."
        self.state_file_path = os.path.join(self.processed_directory, state_file)
        ensure_directory(self.processed_directory)
        cleanup_temp_files(self.processed_directory, os.path.basename(self.state_file_path))
        self._state = self._load_or_initialize_state(axis, values)

    def _load_or_initialize_state(self, axis: str, values: List[str]) -> SweepStateModel:
        if os.path.exists(self.state_file_path):
            try:
                state = SweepStateModel(**load_json(self.state_file_path))
                if state.axis == axis and [r.value for r in state.runs] == list(values):
                    done = sum(r.status == RunStatus.DONE for r in state.runs)
                    logger.info(f"Resuming sweep over {axis}: {done}/{len(values)} runs done.")
                    return state
                logger.warning("Sweep state belongs to another sweep. Starting over.")
            except ValidationError as e:
                logger.error(f"Error loading state file: {e}. Initializing new state.")

        new_state = SweepStateModel(
            axis=axis, runs=[SweepRunState(value=v) for v in values]
        )
        self._save_state(new_state)
        return new_state

    def _save_state(self, state: SweepStateModel) -> None:
        try:
            save_model(self.processed_directory, os.path.basename(self.state_file_path), state)
            logger.debug("Sweep state saved.")
        except OSError as e:
            logger.error(f"Failed to save sweep state: {e}")

    @property
    def state(self) -> SweepStateModel:
        return self._state

    @state.setter
    def state(self, new_state: SweepStateModel) -> None:
        self._state = new_state
        self._save_state(new_state)

    def update_run_state(
        self, value: str, status: RunStatus, row: Optional[SweepRow] = None
    ) -> None:
        run = self.state.get_run(value)
        if run is None:
            raise KeyError(f"value {value!r} is not part of this sweep")
        run.status = status
        if row is not None:
            run.row = row
        self._save_state(self.state)
