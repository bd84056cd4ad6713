import logging

import click

from app.core.config import settings
from app.core.errors import DdmpcError

logger = logging.getLogger(__name__)


class ExitCodeGroup(click.Group):
    """Maps library errors escaping a command to their exit codes"""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except DdmpcError as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"Error: {e}", err=True)
            ctx.exit(e.exit_code)
        except (click.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except Exception as e:
            logger.exception(f"Unexpected error: {e}")
            click.echo(f"Error: {e}", err=True)
            ctx.exit(1)


@click.group(cls=ExitCodeGroup)
@click.option("--verbose", is_flag=True, help="Log at DEBUG level")
@click.version_option("1.0.0", prog_name=settings.APP_NAME)
def cli(verbose: bool):
    """Data-driven distributed MPC for networks of coupled LTI subsystems"""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


from app.cli import generate_data, run, synthesize, sweep, verify  # noqa: E402,F401
