import enum

from dotenv import load_dotenv
from pydantic_settings import BaseSettings

load_dotenv()


class LogLevel(str, enum.Enum):
    """Possible log levels."""

    NOTSET = "NOTSET"
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    FATAL = "FATAL"


class Settings(BaseSettings):
    """Application settings configuration.

    Values can be overridden from the environment or a ``.env`` file, e.g.
    ``WORKERS=8`` or ``SHOW_PROGRESS=true``.
    """

    log_level: LogLevel = LogLevel.INFO
    workers: int = 1
    show_progress: bool = False
    output_dir: str = "results"


settings = Settings()
