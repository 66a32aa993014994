"""Entry point: `uno-sidecar serve --port 8100 --seed 0`."""

from __future__ import annotations

import argparse
import logging

import uvicorn

from .service import create_app


def main() -> None:
    parser = argparse.ArgumentParser(prog="uno-sidecar")
    sub = parser.add_subparsers(dest="command", required=True)
    serve = sub.add_parser("serve", help="run the trainer service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8100)
    serve.add_argument("--seed", type=int, default=0, help="base model initialization seed")
    serve.add_argument("--log-level", default="info")
    args = parser.parse_args()

    logging.basicConfig(level=args.log_level.upper())
    uvicorn.run(create_app(seed=args.seed), host=args.host, port=args.port, log_level=args.log_level)


if __name__ == "__main__":
    main()
