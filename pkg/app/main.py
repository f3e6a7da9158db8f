from typing import Optional

import typer

from app.logFile import logger
from app.routes.dataset_route import dataset_router
from app.routes.eval_route import eval_router
from app.routes.query_route import query_router
from app.routes.render_route import render_router
from app.routes.training_route import training_router
from app.services import set_threads

cli = typer.Typer(add_completion=False, no_args_is_help=True,
                  help="Instance-aware spatio-temporal Gaussian splatting pipeline.")


@cli.callback()
def main(threads: Optional[int] = typer.Option(None, "--threads", min=1,
                                               help="Worker pool size (default: logical cores).")):
    if threads is not None:
        set_threads(threads)
        logger.info(f"Worker pool resized to {threads} threads")


def include_router(app: typer.Typer, router: typer.Typer) -> None:
    app.registered_commands.extend(router.registered_commands)


# Include the routers
include_router(cli, dataset_router)
include_router(cli, training_router)
include_router(cli, render_router)
include_router(cli, query_router)
include_router(cli, eval_router)


if __name__ == "__main__":
    cli()
