import logging

from app.cli import cli
from app.core.config import settings

# Configure logging
logging.basicConfig(
    level=settings.LOG_LEVEL,
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)


def main():
    """Entry point: `python -m app.main <command> --config PATH`"""
    cli(prog_name="ddmpc")


if __name__ == "__main__":
    main()
