"""Launch the guidance sidecar."""

import click
import uvicorn

from .app import create_app


@click.command()
@click.option("--mode", type=click.Choice(["mock", "sd"]), default="mock", show_default=True)
@click.option("--target", type=click.Path(exists=True), default=None,
              help="Mock mode: composite image (.npy/.png) or a directory of 4 views.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8405, show_default=True)
@click.option("--device", default=None, help="sd mode: cuda or cpu (auto by default).")
@click.option("--preload/--no-preload", default=True,
              help="sd mode: load weights before serving (health is 503 until done).")
def main(mode, target, host, port, device, preload):
    if mode == "mock":
        if target is None:
            raise click.UsageError("mock mode needs --target")
        from .mock import MockGuidance, load_target

        backend = MockGuidance(load_target(target))
    else:
        from .sd import SdGuidance

        backend = SdGuidance(device=device)
        if preload:
            backend.load()
    uvicorn.run(create_app(backend), host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
