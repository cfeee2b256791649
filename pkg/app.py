import logging  # Process-wide log configuration
import os  # Path handling for the import fix below
import sys  # Exit status and the python path

# Ensure Python can find our local modules when started from another directory
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config.settings import settings  # noqa: E402
from frontend.cli import main  # noqa: E402


if __name__ == "__main__":
    # One format for every module logger; --log-level can still raise or lower it per run
    logging.basicConfig(
        level=settings.LOG_LEVEL,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
    )
    sys.exit(main())
