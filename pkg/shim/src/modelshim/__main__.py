"""Serve the shim: ``python -m modelshim`` or the ``rankrefine-shim`` script."""

from __future__ import annotations

import argparse
import logging

import uvicorn

from .app import ModelHost, create_app
from .config import ShimConfig


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="rankrefine-shim")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8080)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-jobs", type=int, default=2)
    parser.add_argument("--layout-model", default=ShimConfig.layout_model)
    parser.add_argument("--generate-model", default=ShimConfig.generate_model)
    parser.add_argument("--refine-model", default=ShimConfig.refine_model)
    parser.add_argument("--embed-model", default=ShimConfig.embed_model)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    config = ShimConfig(
        layout_model=args.layout_model,
        generate_model=args.generate_model,
        refine_model=args.refine_model,
        embed_model=args.embed_model,
        device=args.device,
        max_concurrent_jobs=args.max_jobs,
        host=args.host,
        port=args.port,
    )
    config.validate()
    host = ModelHost(config)
    # load in the background so /healthz can report progress immediately
    import threading

    threading.Thread(target=host.load_all, daemon=True).start()
    uvicorn.run(create_app(host), host=config.host, port=config.port, log_level="info")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
