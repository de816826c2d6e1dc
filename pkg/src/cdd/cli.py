"""Command line: thin client over the run layer, in-process by default.

With --server URL the invocation is forwarded to a running HTTP service
instead; the printed result and exit code are the same either way.
"""

from __future__ import annotations

import argparse
import sys

import httpx

from .config import COMMANDS, ConfigError, apply_overrides, config_to_text, parse_config
from .runner import EXIT_CONFIG, EXIT_IO, RunResult, run

_HELP = {
    "pretrain": "train a velocity model (uncond backbone or conditional finetune)",
    "distill": "adapt and distill a conditional few-step model",
    "sample": "draw K-step samples from a saved checkpoint",
    "eval": "compute distribution and reconstruction metrics for a checkpoint",
    "verify": "run the built-in algebraic invariant table",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=_HELP[name])
        sp.add_argument("--config", required=True, help="key = value config file")
        sp.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        sp.add_argument("--seed", type=int, default=None, help="seed (overrides seed)")
        sp.add_argument("--server", default=None,
                        help="base URL of a running service; forward the run there")
    return p


def _print_result(res: RunResult) -> None:
    stream = sys.stdout if res.ok else sys.stderr
    print(res.message, file=stream)
    table = res.payload.get("table") if isinstance(res.payload, dict) else None
    if table:
        print(table, end="", file=stream)
    for art in res.artifacts:
        print(f"wrote {art}", file=stream)


def _remote(server: str, command: str, cfg, client=None) -> int:
    own = client is None
    if own:
        client = httpx.Client(base_url=server, timeout=600.0)
    try:
        resp = client.post(f"/{command}", json={"config_text": config_to_text(cfg)})
        body = resp.json()
        res = RunResult(command, int(body["exit_code"]), body["message"],
                        list(body.get("artifacts", [])), body.get("payload") or {})
        _print_result(res)
        return res.exit_code
    except (httpx.HTTPError, ValueError, KeyError) as e:
        print(f"server error: {e}", file=sys.stderr)
        return EXIT_IO
    finally:
        if own:
            client.close()


def main(argv=None, client=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # remap argparse usage errors onto the config-error exit code
        return 0 if e.code in (0, None) else EXIT_CONFIG
    try:
        cfg = parse_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    cfg = apply_overrides(cfg, out_dir=args.out, seed=args.seed)
    if args.server:
        return _remote(args.server, args.command, cfg, client=client)
    res = run(args.command, cfg)
    _print_result(res)
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
