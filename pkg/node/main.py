import asyncio
import logging
import socket
from dataclasses import dataclass
from typing import Optional

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import PlainTextResponse
import uvicorn

from vctls.config import load_config, parse_bind
from vctls.identity import Did, IdentityError, IdentityKeyPair, canonical_bytes
from vctls.registry import (
    HEADER_REQUEST_ID,
    HEADER_SIGNATURE,
    HEADER_VERSION,
    MODE_AUTHENTICATED,
    MODE_PLAIN,
    REQUEST_ID_SIZE,
    Deactivated,
    Ledger,
    NotFound,
    load_registry_keys,
    sign_resolution,
)

log = logging.getLogger("vctls.node")


def _parse_request_id(value: str) -> bytes:
    try:
        request_id = bytes.fromhex(value)
    except ValueError:
        raise HTTPException(status_code=400, detail=f"{HEADER_REQUEST_ID} must be hex") from None
    if len(request_id) != REQUEST_ID_SIZE:
        raise HTTPException(status_code=400, detail=f"{HEADER_REQUEST_ID} must be {REQUEST_ID_SIZE} bytes")
    return request_id


def create_app(ledger: Ledger, mode: str = MODE_PLAIN, registry_keys: Optional[IdentityKeyPair] = None) -> FastAPI:
    if mode == MODE_AUTHENTICATED and registry_keys is None:
        raise ValueError("authenticated mode needs the registry key")

    app = FastAPI()

    @app.get("/healthz", response_class=PlainTextResponse)
    def healthz():
        return "ok"

    @app.get("/resolve/{method}/{method_specific_id:path}")
    async def resolve(method: str, method_specific_id: str, request: Request):
        try:
            did = Did(method, method_specific_id)
        except IdentityError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e

        request_id = b""
        if mode == MODE_AUTHENTICATED:
            header = request.headers.get(HEADER_REQUEST_ID, "")
            if not header:
                raise HTTPException(status_code=400, detail=f"missing {HEADER_REQUEST_ID}")
            request_id = _parse_request_id(header)

        try:
            entry = await ledger.resolve(did)
        except NotFound:
            raise HTTPException(status_code=404, detail=f"{did} not found") from None
        except Deactivated:
            raise HTTPException(status_code=410, detail=f"{did} deactivated") from None

        body = canonical_bytes(entry.document)
        headers = {HEADER_VERSION: str(entry.version)}
        if mode == MODE_AUTHENTICATED:
            assert registry_keys is not None
            headers[HEADER_SIGNATURE] = sign_resolution(registry_keys, request_id, body).hex()
        return Response(content=body, media_type="application/json", headers=headers)

    @app.get("/api/stats")
    async def api_stats():
        counts = await ledger.counts()
        return {"mode": mode, **counts}

    return app


@dataclass
class RunningService:
    server: uvicorn.Server
    task: asyncio.Task
    base_url: str

    async def stop(self):
        self.server.should_exit = True
        await self.task


async def serve_http(
    ledger: Ledger,
    host: str = "127.0.0.1",
    port: int = 0,
    mode: str = MODE_PLAIN,
    registry_keys: Optional[IdentityKeyPair] = None,
) -> RunningService:
    """Starts the resolver service on the running loop. Port 0 picks a free port."""
    app = create_app(ledger, mode, registry_keys)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    bound_host, bound_port = sock.getsockname()[:2]

    server = uvicorn.Server(uvicorn.Config(app, log_level="warning", lifespan="off"))
    task = asyncio.create_task(server.serve(sockets=[sock]))
    while not server.started:
        if task.done():
            task.result()
            raise RuntimeError("resolver service exited during startup")
        await asyncio.sleep(0.01)

    url_host = "127.0.0.1" if bound_host in ("0.0.0.0", "") else bound_host
    log.info("Resolver service on %s:%s (%s)", bound_host, bound_port, mode)
    return RunningService(server=server, task=task, base_url=f"http://{url_host}:{bound_port}")


async def main():
    cfg = load_config()
    logging.basicConfig(
        level=cfg.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    host, port = parse_bind(cfg.registry_bind)

    registry_keys = None
    if cfg.registry_mode == MODE_AUTHENTICATED:
        registry_keys = load_registry_keys(cfg.registry_key_path, create=True)
        log.info("Registry public key: %s", registry_keys.pk.hex())

    ledger = Ledger(cfg.ledger_path)
    await ledger.open()
    app = create_app(ledger, cfg.registry_mode, registry_keys)
    server = uvicorn.Server(uvicorn.Config(app, host=host, port=port, lifespan="off"))
    try:
        await server.serve()
    finally:
        await ledger.close()


if __name__ == "__main__":
    asyncio.run(main())
