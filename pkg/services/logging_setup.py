import sys
from pathlib import Path

from loguru import logger

FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level:<8} | {name}:{function}:{line} - {message}"
CONSOLE_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level:<8}</level> | {message}"


def setup_logging(logs_dir: Path, level: str = "INFO", filename: str = "cascade.log") -> Path:
    """Route loguru to a rotating file under ``logs_dir`` and to stderr.

    Safe to call more than once; existing sinks are dropped first.
    """
    logs_dir = Path(logs_dir)
    logs_dir.mkdir(parents=True, exist_ok=True)
    log_path = logs_dir / filename

    logger.remove()
    logger.add(
        log_path,
        rotation="10 MB",
        retention=10,
        backtrace=True,
        diagnose=False,
        level=level.upper(),
        enqueue=True,
        format=FILE_FORMAT,
    )
    # stdout is reserved for command output (infer prints JSON)
    logger.add(sys.stderr, level=level.upper(), format=CONSOLE_FORMAT)
    return log_path
