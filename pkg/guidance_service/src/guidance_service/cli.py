"""Command-line entry point: `guidance-service serve`."""

import argparse
import sys

from .backends import BackendError
from .service import ServiceConfig, create_app


def main(argv=None):
    parser = argparse.ArgumentParser(prog="guidance-service")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8501)
    p.add_argument("--model", default="mock-diffusion")
    p.add_argument("--mock", action="store_true", default=True,
                   help="serve the seeded mock backend (default)")
    p.add_argument("--no-mock", dest="mock", action="store_false",
                   help="attempt to load a real model backend")
    p.add_argument("--cache-size", type=int, default=1024,
                   help="prompt store capacity")

    args = parser.parse_args(argv)
    try:
        config = ServiceConfig(model=args.model, port=args.port,
                               prompt_cache_size=args.cache_size,
                               mock=args.mock)
        app = create_app(config)
    except (BackendError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    import uvicorn

    uvicorn.run(app, host=args.host, port=config.port, log_level="info")
    return 0


if __name__ == "__main__":
    sys.exit(main())
