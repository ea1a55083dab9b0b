"""
Logging setup for mil_action.

Configures the "MilAction" logger tree with a rotating log file and a
warnings-only console handler.
"""

import logging
from datetime import datetime
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

VALID_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


def setup_logging(config, log_dir: Optional[str] = None) -> logging.Logger:
    """
    Configure logging with a rotating file handler.

    Args:
        config: ConfigManager instance (reads log_level and log_dir)
        log_dir: Directory for log files; overrides the configured one. An empty
            string disables the log file.

    Returns:
        The configured "MilAction" logger
    """
    log_level_str = config.get("log_level", "INFO")
    if log_level_str not in VALID_LOG_LEVELS:
        log_level_str = "INFO"
    log_level = getattr(logging, log_level_str)
    if log_dir is None:
        log_dir = config.get("log_dir", "data/logs")

    logger = logging.getLogger("MilAction")
    logger.setLevel(log_level)

    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()

    detailed_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    console_formatter = logging.Formatter('%(levelname)s: %(message)s')

    log_file = None
    if log_dir:
        log_path = Path(log_dir)
        log_path.mkdir(parents=True, exist_ok=True)
        log_file = log_path / f"mil_action_{datetime.now().strftime('%Y-%m-%d')}.log"
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=10 * 1024 * 1024,
            backupCount=5,
            encoding='utf-8'
        )
        file_handler.setLevel(log_level)
        file_handler.setFormatter(detailed_formatter)
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.WARNING)
    console_handler.setFormatter(console_formatter)
    logger.addHandler(console_handler)

    logger.info("=" * 60)
    logger.info("mil_action logging initialized")
    logger.info(f"Log level: {log_level_str}")
    logger.info(f"Log file: {log_file if log_file else 'disabled'}")
    logger.info("=" * 60)

    return logger
