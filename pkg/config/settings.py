import os  # Access to process environment variables
from dotenv import load_dotenv  # Loads a local .env file into the environment

# Load the .env file as soon as this module is imported,
# so os.getenv() below sees any POLARSEP_* overrides.
load_dotenv()


def _int_from_env(name: str, default: int) -> int:
    """Reads an integer variable, falling back to the default on junk values."""
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        return default


class Settings:
    """
    Centralized configuration class.
    Acts as the 'Single Source of Truth' for process-wide settings.
    Per-run parameters (solver weights, patterns, scenes) live in the JSON manifest instead.
    """

    # 1. Parallelism cap
    # Upper bound on worker threads for per-channel solves, dome lights and sweep runs.
    THREADS = max(1, _int_from_env("POLARSEP_THREADS", 1))

    # 2. Log verbosity
    LOG_LEVEL = os.getenv("POLARSEP_LOG_LEVEL", "INFO").upper()

    # 3. Run archive
    # Path of the SQLite archive. Unset means runs are not archived.
    ARCHIVE_PATH = os.getenv("POLARSEP_ARCHIVE") or None

    # 4. Default output directory when neither the manifest nor --out names one
    OUTPUT_DIR = os.getenv("POLARSEP_OUTPUT_DIR", "runs")


# Other modules import this instance, not the class.
settings = Settings()
