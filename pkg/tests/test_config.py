import logging

import pytest

from dense_ba.config.logger import HANDLER_NAME, handler, logger, set_log_level


@pytest.fixture
def restore_level():
    yield
    set_log_level(logging.INFO)


class TestLogger:
    def test_single_named_console_handler(self):
        assert logger.name == "dense_ba"
        assert [h.get_name() for h in logger.handlers] == [HANDLER_NAME]
        assert not logger.propagate

    def test_records_carry_thread_name(self):
        record = logging.LogRecord("dense_ba", logging.INFO, __file__, 1, "merged", None, None)
        record.threadName = "backend_0"
        assert "backend_0: merged" in handler.formatter.format(record)

    def test_set_log_level(self, restore_level):
        set_log_level("debug")
        assert logger.level == logging.DEBUG
        assert handler.level == logging.DEBUG
        set_log_level(logging.WARNING)
        assert logger.level == handler.level == logging.WARNING

    def test_unknown_level_rejected(self, restore_level):
        with pytest.raises(ValueError):
            set_log_level("chatty")
