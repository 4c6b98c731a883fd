import argparse
import asyncio
import logging
import sys
from typing import Optional, Sequence

from .commands import (
    EXIT_UNEXPECTED,
    cmd_attack,
    cmd_bench,
    cmd_client,
    cmd_genchain,
    cmd_genid,
    cmd_issue,
    cmd_serve_registry,
    cmd_server,
    exit_code_for,
)
from .config import load_config


def _endpoint_options(p: argparse.ArgumentParser, accept_default: str):
    p.add_argument("--vc", help="identity bundle directory with identity.key, did-document.pem, vc.pem")
    p.add_argument("--chain", help="chain bundle directory with chain.pem and leaf.key")
    p.add_argument("--rpk", help="hex key file for raw public key authentication")
    p.add_argument("--present", help="certificate types to present, in preference order (vc,x509,rpk)")
    p.add_argument("--accept", default=accept_default, help="certificate types accepted from the peer")
    p.add_argument("--did-methods", help="DID method names to offer (default: the whole method table)")
    p.add_argument("--trust-anchor", action="append", help="PEM file with trusted root certificates")
    p.add_argument("--trust-raw", action="append", help="trusted raw public key, hex")
    p.add_argument("--pin-issuer", action="append", help="pinned issuer as DID=HEXKEY")
    p.add_argument("--mode", default=None, help="resolver channel: plain or authenticated")
    p.add_argument("--registry-url", help="resolver service base URL")
    p.add_argument("--registry-key", help="registry public key, hex")
    p.add_argument("--legacy", action="store_true", help="disable certificate-type negotiation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vctls", description="VC-authenticated TLS 1.3 handshakes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("genid", help="generate a DID identity and register its document")
    p.add_argument("--method", default="iota")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", help="hex seed for a reproducible key")
    p.add_argument("--ledger", help="ledger database (default LEDGER_PATH)")
    p.set_defaults(func=cmd_genid)

    p = sub.add_parser("issue", help="issue a verifiable credential")
    p.add_argument("--issuer", required=True, help="issuer bundle directory")
    p.add_argument("--subject", required=True, help="subject DID")
    p.add_argument("--claims", required=True, help="JSON file with the credential claims")
    p.add_argument("--out", required=True, help="where to write vc.pem")
    p.add_argument("--validity", help="duration such as 365d (default VC_VALIDITY)")
    p.add_argument("--not-before", help="start of validity, 2026-01-01T00:00:00Z")
    p.add_argument("--not-after", help="end of validity, overrides --validity")
    p.set_defaults(func=cmd_issue)

    p = sub.add_parser("genchain", help="generate a three-link certificate chain")
    p.add_argument("--out", required=True)
    p.add_argument("--subject", default="device")
    p.add_argument("--ca-name", default="vctls-ca")
    p.add_argument("--root-name", default="vctls-root")
    p.add_argument("--validity")
    p.set_defaults(func=cmd_genchain)

    p = sub.add_parser("serve-registry", help="run the DID resolver service")
    p.add_argument("--bind")
    p.add_argument("--mode", default=None)
    p.add_argument("--key", help="registry signing key file")
    p.add_argument("--ledger")
    p.set_defaults(func=cmd_serve_registry)

    p = sub.add_parser("server", help="accept one handshake and echo one message")
    p.add_argument("--listen", default="127.0.0.1:4433")
    p.add_argument("--mutual", action="store_true", help="request client authentication")
    _endpoint_options(p, accept_default="vc,x509")
    p.set_defaults(func=cmd_server)

    p = sub.add_parser("client", help="run one handshake and an echo round trip")
    p.add_argument("--connect", default="127.0.0.1:4433")
    p.add_argument("--message", default="ping")
    _endpoint_options(p, accept_default="vc,x509")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("bench", help="run benchmark scenarios")
    p.add_argument("--scenarios", required=True)
    p.add_argument("--records", help="JSON lines output, one record per scenario")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--pool-size", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("attack", help="forged DID resolution against a VC client")
    p.add_argument("--mode", default="plain")
    p.add_argument("--server-cred", default="vc")
    p.add_argument("--via-http", action="store_true", help="resolve through the HTTP service")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_attack)
    return parser


async def run(argv: Optional[Sequence[str]] = None) -> int:
    cfg = load_config()
    logging.basicConfig(
        level=cfg.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    log = logging.getLogger("vctls")

    args = build_parser().parse_args(argv)
    if getattr(args, "mode", "") is None:
        args.mode = cfg.registry_mode
    try:
        return await args.func(args, cfg)
    except Exception as e:
        code = exit_code_for(e)
        if code == EXIT_UNEXPECTED:
            log.exception("%s failed", args.command)
        else:
            log.error("%s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return code


def main():
    try:
        code = asyncio.run(run())
    except KeyboardInterrupt:
        code = 130
    sys.exit(code)


if __name__ == "__main__":
    main()
