import os
from typing import Dict
from dotenv import load_dotenv
from dense_ba.config.logger import logger, set_log_level


# Optional variables and their defaults
DEFAULTS: Dict[str, str] = {
    "DENSE_BA_LOG_LEVEL": "INFO",
    "DENSE_BA_WORKERS": "1",
}


def load_env_config() -> Dict[str, str]:
    """
    Load environment configuration from .env file or system environment.

    Returns:
        A dictionary with every known variable, filled with defaults when unset.
    """
    env_file_path = os.path.abspath(
        os.path.join(os.path.dirname(__file__), "../../../.env")
    )
    if os.path.exists(env_file_path):
        load_dotenv(env_file_path)
        logger.debug(f"Loaded environment from: {env_file_path}")
    else:
        logger.debug("No .env file found. Using system environment variables.")

    env_config = {}
    for var, default in DEFAULTS.items():
        value = os.getenv(var)
        env_config[var] = value if value is not None else default
        status = "Set" if value is not None else f"Default ({default})"
        logger.debug(f"{var}: {status}")

    try:
        set_log_level(env_config["DENSE_BA_LOG_LEVEL"])
    except ValueError:
        logger.warning(
            f"Unknown log level '{env_config['DENSE_BA_LOG_LEVEL']}', keeping INFO."
        )

    return env_config


def default_workers() -> int:
    try:
        return max(1, int(env_config["DENSE_BA_WORKERS"]))
    except ValueError:
        logger.warning("DENSE_BA_WORKERS is not an integer, using 1.")
        return 1


env_config = load_env_config()
