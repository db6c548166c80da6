"""Benchmark CLI: a thin client over the service API.

By default requests are served in-process through an ASGI transport (no
server needed); `--server URL` targets a running instance instead, in which
case file paths are interpreted on the server side.

Exit codes: 0 success, 1 usage error, 2 run-level failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import httpx

USAGE_ERROR = 1
RUN_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(USAGE_ERROR)


def build_parser() -> _Parser:
    parser = _Parser(prog="localmap", description=__doc__)
    parser.add_argument("--server", default=None, help="base URL of a running service")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic keyframe sequence")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--landmarks", type=int, default=400)
    gen.add_argument("--keyframes", type=int, default=30)
    gen.add_argument("--features", type=int, default=300)
    gen.add_argument("--noise", type=float, default=0.0, help="pixel noise sigma (px)")
    gen.add_argument("--duplicates", type=float, default=0.0)
    gen.add_argument("--trajectory", default="line", choices=["line", "orbit", "corridor-loop"])
    gen.add_argument("--extent", type=float, default=20.0)
    gen.add_argument("--spurious", type=float, default=0.0)
    gen.add_argument("--flip-bits", type=int, default=0)
    gen.add_argument("--min-covisible", type=int, default=20)
    gen.add_argument("--no-gt", action="store_true", help="skip writing the ground-truth trajectory")
    gen.add_argument("--out", required=True)

    run = sub.add_parser("run", help="run the local-mapping pipeline over a sequence")
    run.add_argument("--seq", required=True)
    run.add_argument("--mode", default="baseline", choices=["baseline", "optimized"])
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--stress", action="store_true")
    run.add_argument("--repeat", type=int, default=1)
    run.add_argument("--queue-capacity", type=int, default=3)
    run.add_argument("--min-kf-interval", type=int, default=None)
    run.add_argument("--skip-lba", action="store_true", help="forcibly skip LBA every keyframe")
    run.add_argument("--skip-culling", action="store_true")
    run.add_argument("--out", default=None, help="write the JSON report here")
    run.add_argument("--traj", default=None, help="write the estimated trajectory here")

    cmp = sub.add_parser("compare", help="pair a baseline report with an optimized one")
    cmp.add_argument("--baseline", required=True)
    cmp.add_argument("--optimized", required=True)
    cmp.add_argument("--out", default=None)
    cmp.add_argument("--table", action="store_true", help="print a per-stage text table")

    ate = sub.add_parser("ate", help="absolute trajectory error between two trajectory files")
    ate.add_argument("--traj", required=True)
    ate.add_argument("--gt", required=True)
    ate.add_argument("--align-scale", action="store_true")

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8080)
    return parser


class InProcessClient:
    """Sync facade over the ASGI app: each request runs in its own event loop."""

    def __init__(self):
        from .service import create_app

        self._app = create_app()

    def post(self, path: str, json: dict) -> httpx.Response:
        import asyncio

        async def go():
            transport = httpx.ASGITransport(app=self._app)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://localmap", timeout=None
            ) as client:
                return await client.post(path, json=json)

        return asyncio.run(go())

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def make_client(server: str | None):
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    return InProcessClient()


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    try:
        resp = client.post(path, json=payload)
    except httpx.HTTPError as err:
        print(f"error: cannot reach service: {err}", file=sys.stderr)
        sys.exit(RUN_ERROR)
    if resp.status_code >= 500:
        print(f"error: {resp.json().get('detail', resp.text)}", file=sys.stderr)
        sys.exit(RUN_ERROR)
    if resp.status_code >= 400:
        detail = resp.json().get("detail", resp.text)
        print(f"error: {detail}", file=sys.stderr)
        sys.exit(USAGE_ERROR)
    return resp.json()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    with make_client(args.server) as client:
        if args.command == "generate":
            out = _post(
                client,
                "/sequences/generate",
                {
                    "out": args.out,
                    "seed": args.seed,
                    "landmarks": args.landmarks,
                    "keyframes": args.keyframes,
                    "features": args.features,
                    "noise": args.noise,
                    "duplicates": args.duplicates,
                    "trajectory": args.trajectory,
                    "extent": args.extent,
                    "spurious_fraction": args.spurious,
                    "descriptor_flip_bits": args.flip_bits,
                    "min_covisible": args.min_covisible,
                    "write_gt": not args.no_gt,
                },
            )
            print(json.dumps(out, indent=2))
        elif args.command == "run":
            out = _post(
                client,
                "/runs",
                {
                    "seq": args.seq,
                    "mode": args.mode,
                    "workers": args.workers,
                    "stress": args.stress,
                    "repeat": args.repeat,
                    "queue_capacity": args.queue_capacity,
                    "min_kf_interval_frames": args.min_kf_interval,
                    "force_skip_lba": args.skip_lba,
                    "force_skip_culling": args.skip_culling,
                    "out": args.out,
                    "traj": args.traj,
                },
            )
            report = out["report"]
            summary = {
                "mode": report["pipeline"]["mode"],
                "keyframes": report["sequence"]["keyframes_processed"],
                "total_ms_mean": report["stages"]["total"]["mean_ms"],
                "ate_m": report.get("ate", {}).get("rmse_m"),
                "lba_skips": report["skips"]["lba_skips"],
                "out": out["out_path"],
                "traj": out["traj_path"],
            }
            print(json.dumps(summary, indent=2))
        elif args.command == "compare":
            out = _post(
                client,
                "/reports/compare",
                {
                    "baseline": args.baseline,
                    "optimized": args.optimized,
                    "out": args.out,
                    "table": args.table,
                },
            )
            if args.table and out.get("table"):
                print(out["table"])
            else:
                print(json.dumps(out["report"], indent=2))
        elif args.command == "ate":
            out = _post(
                client,
                "/evaluate/ate",
                {"traj": args.traj, "gt": args.gt, "align_scale": args.align_scale},
            )
            print(json.dumps(out, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
