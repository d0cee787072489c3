from logging import getLogger
from logging import StreamHandler
from colorlog import ColoredFormatter
from logging import INFO

HANDLER_NAME = "dense_ba.console"

logger = getLogger("dense_ba")
logger.setLevel(INFO)

# The backend worker logs from threads named "backend_N".
formatter = ColoredFormatter(
    "%(asctime)s [ %(log_color)s%(levelname)s%(reset)s ] %(threadName)s: %(message)s",
    datefmt="%H:%M:%S",
    reset=True,
    log_colors={
        'DEBUG': 'cyan',
        'INFO': 'green',
        'WARNING': 'yellow',
        'ERROR': 'red',
        'CRITICAL': 'red,bg_white',
    },
    style='%'
)

handler = next((h for h in logger.handlers if h.get_name() == HANDLER_NAME), None)
if handler is None:
    handler = StreamHandler()
    handler.set_name(HANDLER_NAME)
    logger.addHandler(handler)
handler.setLevel(INFO)
handler.setFormatter(formatter)
logger.propagate = False


def set_log_level(level: str | int) -> None:
    """Set the level of the package logger and its console handler; unknown names raise ValueError."""
    if isinstance(level, str):
        level = level.upper()
    logger.setLevel(level)
    handler.setLevel(level)
