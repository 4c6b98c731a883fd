from dataclasses import dataclass
import os
from dotenv import load_dotenv

from .wire import DEFAULT_DID_METHODS, DidMethodTable, Codepoints

load_dotenv()

REGISTRY_MODES = {"plain", "authenticated"}


def parse_duration(s: str) -> int:
    """
    '30m' -> 1800, '1h' -> 3600, '1d' -> 86400, '45s' -> 45
    """
    s = (s or "").strip().lower()
    if not s:
        raise ValueError("Empty duration")

    num = ""
    unit = ""
    for ch in s:
        if ch.isdigit():
            num += ch
        else:
            unit += ch

    if not num or unit not in {"s", "m", "h", "d"}:
        raise ValueError(f"Invalid duration format: {s}")

    n = int(num)
    mult = {"s": 1, "m": 60, "h": 3600, "d": 86400}[unit]
    return n * mult


def parse_bind(s: str) -> tuple[str, int]:
    """
    '0.0.0.0:9005' -> ('0.0.0.0', 9005)
    """
    host, sep, port = (s or "").strip().rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"Invalid bind address: {s}")
    return host, int(port)


def _parse_method_table_lines(text: str) -> dict[int, str]:
    """
    Table file is line-oriented 'code,name'.
    Header lines and malformed lines are skipped.
    """
    out: dict[int, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.lower().startswith("code"):
            continue
        first, _, rest = line.partition(",")
        name = rest.strip().lower()
        try:
            code = int(first.strip())
        except ValueError:
            continue
        if not name or not 0 <= code <= 0xFFFF:
            continue
        out[code] = name
    return out


def load_did_method_table(path: str) -> DidMethodTable:
    if not path:
        return DEFAULT_DID_METHODS
    with open(path, "r", encoding="utf-8") as f:
        entries = _parse_method_table_lines(f.read())
    if not entries:
        raise ValueError(f"DID method table {path} has no entries")
    return DidMethodTable(entries)


@dataclass(frozen=True)
class Config:
    ledger_path: str

    registry_url: str
    registry_mode: str
    registry_key_path: str
    registry_public_key: str
    registry_bind: str
    registry_cooldown_sec: int

    http_timeout_seconds: int
    handshake_timeout_sec: int

    codepoints: Codepoints
    did_methods_table: DidMethodTable
    vc_validity_sec: int

    bench_repetitions: int
    bench_pool_size: int
    bench_workers: int

    log_level: str


def load_config() -> Config:
    registry_mode = os.getenv("REGISTRY_MODE", "plain").strip().lower()
    if registry_mode not in REGISTRY_MODES:
        raise ValueError(f"REGISTRY_MODE must be one of {sorted(REGISTRY_MODES)}")

    return Config(
        ledger_path=os.getenv("LEDGER_PATH", "./data/ledger.sqlite3"),

        registry_url=os.getenv("REGISTRY_URL", "http://127.0.0.1:9005").rstrip("/"),
        registry_mode=registry_mode,
        registry_key_path=os.getenv("REGISTRY_KEY_PATH", "./data/registry.key"),
        registry_public_key=os.getenv("REGISTRY_PUBLIC_KEY", "").strip(),
        registry_bind=os.getenv("REGISTRY_BIND", "0.0.0.0:9005"),
        registry_cooldown_sec=int(os.getenv("REGISTRY_COOLDOWN_SEC", "5")),

        http_timeout_seconds=int(os.getenv("HTTP_TIMEOUT_SECONDS", "15")),
        handshake_timeout_sec=parse_duration(os.getenv("HANDSHAKE_TIMEOUT", "10s")),

        codepoints=Codepoints(
            vc_cert_type=int(os.getenv("VC_CERT_TYPE", "240")),
            did_methods_extension=int(os.getenv("DID_METHODS_EXTENSION", "65280")),
        ),
        did_methods_table=load_did_method_table(os.getenv("DID_METHODS_TABLE", "").strip()),
        vc_validity_sec=parse_duration(os.getenv("VC_VALIDITY", "365d")),

        bench_repetitions=int(os.getenv("BENCH_REPETITIONS", "100")),
        bench_pool_size=int(os.getenv("BENCH_POOL_SIZE", "32")),
        bench_workers=int(os.getenv("BENCH_WORKERS", "1")),

        log_level=os.getenv("LOG_LEVEL", "INFO").upper(),
    )
