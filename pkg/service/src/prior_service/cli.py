"""Service command line: serve, conformance replay, fixture regeneration."""

from __future__ import annotations

import argparse
import json
import sys


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prior-service",
                                     description="Generative-prior HTTP service")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the service")
    p.add_argument("--host", default="127.0.0.1", help="bind address (default: 127.0.0.1)")
    p.add_argument("--port", type=int, default=8791, help="port (default: 8791)")
    p.add_argument("--backend", default="mock:silhouette",
                   help="mock:<oracle|offset|silhouette> or diffusion (default: mock:silhouette)")

    p = sub.add_parser("conformance", help="replay fixtures against a live service")
    p.add_argument("--target", required=True, help="service base URL")
    p.add_argument("--fixtures", default=None, help="fixture directory (default: bundled)")
    p.add_argument("--out", default=None, help="write the JSON report here (default: stdout)")

    p = sub.add_parser("gen-fixtures", help="regenerate the fixture corpus")
    p.add_argument("--out", default=None, help="fixture directory (default: bundled)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        from .app import create_app
        from .config import ServiceConfig

        config = ServiceConfig(host=args.host, port=args.port, backend=args.backend)
        uvicorn.run(create_app(config), host=config.host, port=config.port,
                    log_level="warning")
        return 0

    if args.command == "conformance":
        from .conformance import DEFAULT_FIXTURES, run_suite

        report = run_suite(args.target, args.fixtures or DEFAULT_FIXTURES)
        text = json.dumps(report, indent=2)
        if args.out:
            from pathlib import Path

            Path(args.out).write_text(text)
        else:
            print(text)
        if "transport_failure" in report:
            print(f"transport failure: {report['transport_failure']}", file=sys.stderr)
            return 1
        n = len(report["cases"])
        print(f"{n - report['failed_cases']}/{n} cases passed "
              f"against {report.get('backend_kind')}", file=sys.stderr)
        return 0 if report["passed"] else 1

    if args.command == "gen-fixtures":
        from .conformance import DEFAULT_FIXTURES, generate_fixtures

        written = generate_fixtures(args.out or DEFAULT_FIXTURES)
        print(f"wrote {len(written)} fixture cases")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
