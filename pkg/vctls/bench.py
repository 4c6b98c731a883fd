"""
Benchmark scenarios: repeated handshakes over a shared registry with
credentials drawn at random from a pre-generated pool. Every run is checked
against the resolve-count and identity-object laws.
"""
import asyncio
import json
import logging
import random
import statistics
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from typing import Iterable, Optional

from .handshake import EndpointConfig, HandshakeAlert, HandshakeResult, Role, run_handshake
from .identity import (
    ChainBundle,
    ChainCertificate,
    Credential,
    Did,
    IdentityKeyPair,
    RawKeyBundle,
    VcBundle,
    generate_identity,
    issue_vc,
    make_chain,
    utcnow,
)
from .registry import (
    MODE_AUTHENTICATED,
    MODE_PLAIN,
    DidResolver,
    Ledger,
    LedgerSource,
    ResolverChannel,
)
from .transport import MemoryTransport, tcp_pair
from .wire import DEFAULT_DID_METHODS, CertificateKind, Codepoints, DidMethodTable

log = logging.getLogger("vctls.bench")

FLOWS = ("unilateral", "mutual")
CRED_KINDS = {"vc": CertificateKind.VC, "x509": CertificateKind.X509, "rpk": CertificateKind.RAW_PUBLIC_KEY}
TRANSPORTS = ("memory", "tcp")
SWITCH = {"on": True, "off": False}

# identity-object bytes one authenticating endpoint transmits
OBJECT_BYTES = {
    CertificateKind.X509: 2 * 32 + 3 * 64,
    CertificateKind.VC: 2 * 64,
    CertificateKind.RAW_PUBLIC_KEY: 32 + 64,
}

ISSUER_COUNT = 4


class BenchError(Exception):
    pass


class ScenarioError(BenchError):
    pass


class LawViolation(BenchError):
    def __init__(self, message: str, reports: Optional[list] = None):
        super().__init__(message)
        self.reports = reports or []


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    flow: str = "unilateral"
    client_cred: Optional[str] = None
    server_cred: str = "vc"
    resolver: str = MODE_PLAIN
    pinning: bool = False
    repetitions: int = 100
    transport: str = "memory"
    legacy_server: bool = False

    @property
    def mutual(self) -> bool:
        return self.flow == "mutual"

    @property
    def server_kind(self) -> CertificateKind:
        return CRED_KINDS[self.server_cred]

    @property
    def client_kind(self) -> Optional[CertificateKind]:
        return CRED_KINDS[self.client_cred] if self.client_cred else None

    def validate(self):
        if self.flow not in FLOWS:
            raise ValueError(f"flow must be one of {FLOWS}")
        if self.server_cred not in CRED_KINDS:
            raise ValueError(f"server_cred must be one of {sorted(CRED_KINDS)}")
        if self.mutual and self.client_cred not in CRED_KINDS:
            raise ValueError("mutual flows need client_cred")
        if not self.mutual and self.client_cred is not None:
            raise ValueError("client_cred is only meaningful for mutual flows")
        if self.resolver not in (MODE_PLAIN, MODE_AUTHENTICATED):
            raise ValueError("resolver must be plain or authenticated")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}")
        if self.legacy_server and (self.server_cred != "x509" or self.client_cred not in (None, "x509")):
            raise ValueError("a legacy server only handles x509 credentials")

    def expected_client_resolves(self) -> int:
        if self.server_kind is not CertificateKind.VC or self.legacy_server:
            return 0
        return 1 if self.pinning else 2

    def expected_server_resolves(self) -> int:
        if not self.mutual or self.client_kind is not CertificateKind.VC:
            return 0
        return 1 if self.pinning else 2

    def expected_objects_server_to_client(self) -> int:
        return OBJECT_BYTES[self.server_kind]

    def expected_objects_client_to_server(self) -> int:
        return OBJECT_BYTES[self.client_kind] if self.mutual else 0


_KEYS = {
    "name": str,
    "flow": str,
    "client_cred": str,
    "server_cred": str,
    "resolver": str,
    "pinning": "switch",
    "repetitions": int,
    "transport": str,
    "legacy_server": "switch",
}


def parse_scenarios(text: str, source: str = "<scenarios>", default_repetitions: int = 100) -> list[ScenarioSpec]:
    """
    One scenario per line as space-separated key=value pairs. '#' starts a comment.
    """
    specs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        values: dict = {"repetitions": default_repetitions}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep or key not in _KEYS:
                raise ScenarioError(f"{source}:{lineno}: unknown or malformed field {token!r}")
            kind = _KEYS[key]
            if kind == "switch":
                if value.lower() not in SWITCH:
                    raise ScenarioError(f"{source}:{lineno}: {key} must be on or off")
                values[key] = SWITCH[value.lower()]
            elif kind is int:
                try:
                    values[key] = int(value)
                except ValueError:
                    raise ScenarioError(f"{source}:{lineno}: {key} must be an integer") from None
            else:
                values[key] = value.lower() if key != "name" else value
        values.setdefault("name", f"scenario-{lineno}")
        spec = ScenarioSpec(**values)
        try:
            spec.validate()
        except ValueError as e:
            raise ScenarioError(f"{source}:{lineno}: {e}") from e
        specs.append(spec)
    if not specs:
        raise ScenarioError(f"{source}: no scenarios")
    return specs


class CredentialPool:
    """
    Pre-generated credentials of every kind. Chains share one root, and VCs
    come from a handful of registered issuers.
    """

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.vcs: list[VcBundle] = []
        self.chains: list[ChainBundle] = []
        self.raw_keys: list[RawKeyBundle] = []
        self.issuers: dict[Did, bytes] = {}
        self.root: Optional[ChainCertificate] = None

    def _seed(self) -> bytes:
        return self.rng.randbytes(32)

    async def build(
        self,
        ledger: Ledger,
        size: int,
        now: datetime,
        validity: timedelta,
        methods: DidMethodTable = DEFAULT_DID_METHODS,
    ) -> "CredentialPool":
        not_before, not_after = now - timedelta(minutes=5), now + validity
        # lowest code in the configured table; every table has one
        method = methods.items()[0][1]

        issuers = []
        for _ in range(ISSUER_COUNT):
            keys, did, doc = generate_identity(method, self._seed(), methods)
            await ledger.create(doc)
            issuers.append((keys, did))
            self.issuers[did] = keys.pk

        for i in range(size):
            keys, did, doc = generate_identity(method, self._seed(), methods)
            await ledger.create(doc)
            issuer_keys, issuer = self.rng.choice(issuers)
            claims = {"deviceId": f"device-{i}", "model": "bench-node"}
            vc = issue_vc(issuer_keys, issuer, did, claims, not_before, not_after)
            self.vcs.append(VcBundle(keys=keys, document=doc, vc=vc))

        root_keys = IdentityKeyPair.generate(self._seed())
        for i in range(size):
            chain = make_chain(
                ("bench-root", f"bench-ca-{i}", f"device-{i}"),
                not_before,
                not_after,
                root_keys=root_keys,
                seed=self._seed(),
            )
            self.chains.append(chain)
        self.root = self.chains[0].root

        for _ in range(size):
            self.raw_keys.append(RawKeyBundle(IdentityKeyPair.generate(self._seed())))
        return self

    def pick(self, kind: CertificateKind) -> Credential:
        if kind is CertificateKind.VC:
            return self.rng.choice(self.vcs)
        if kind is CertificateKind.X509:
            return self.rng.choice(self.chains)
        return self.rng.choice(self.raw_keys)

    @property
    def trusted_raw_keys(self) -> frozenset[bytes]:
        return frozenset(b.keys.pk for b in self.raw_keys)


@dataclass
class ScenarioReport:
    name: str
    flow: str
    client_cred: Optional[str]
    server_cred: str
    resolver: str
    pinning: bool
    transport: str
    legacy_server: bool
    repetitions: int
    completed: int = 0
    latency_mean_ms: float = 0.0
    latency_stdev_ms: float = 0.0
    resolve_mean_ms: float = 0.0
    server_bytes_sent_mean: float = 0.0
    client_bytes_sent_mean: float = 0.0
    objects_server_to_client: int = 0
    objects_client_to_server: int = 0
    client_resolves: int = 0
    server_resolves: int = 0
    did_resolves: int = 0
    violations: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunSample:
    latency: float
    resolve_seconds: float
    client_bytes: int
    server_bytes: int
    objects_s2c: int
    objects_c2s: int
    client_resolves: int
    server_resolves: int


class BenchRunner:
    def __init__(
        self,
        ledger: Ledger,
        registry_keys: IdentityKeyPair,
        pool: CredentialPool,
        codepoints: Codepoints = Codepoints(),
        methods: DidMethodTable = DEFAULT_DID_METHODS,
        workers: int = 1,
        timeout: float = 10.0,
    ):
        self.ledger = ledger
        self.registry_keys = registry_keys
        self.pool = pool
        self.codepoints = codepoints
        self.methods = methods
        self.workers = max(1, workers)
        self.timeout = timeout

    def _resolver(self, spec: ScenarioSpec) -> DidResolver:
        channel = ResolverChannel(spec.resolver, self.registry_keys.pk if spec.resolver == MODE_AUTHENTICATED else None)
        return DidResolver(LedgerSource(self.ledger, self.registry_keys), channel)

    def endpoint_configs(self, spec: ScenarioSpec) -> tuple[EndpointConfig, EndpointConfig]:
        codes = tuple(code for code, _ in self.methods.items())
        common = dict(
            did_methods=codes,
            method_table=self.methods,
            trusted_issuers=dict(self.pool.issuers) if spec.pinning else {},
            trust_anchors=(self.pool.root,),
            trusted_raw_keys=self.pool.trusted_raw_keys,
            codepoints=self.codepoints,
        )
        server_kind = spec.server_kind
        client_kind = spec.client_kind
        client_accepts = (CertificateKind.VC, CertificateKind.X509) if spec.legacy_server else (server_kind,)

        client = EndpointConfig(
            role=Role.CLIENT,
            credentials={client_kind: self.pool.pick(client_kind)} if client_kind else {},
            client_cert_types=(client_kind,) if client_kind else (),
            server_cert_types=client_accepts,
            resolver=self._resolver(spec),
            **common,
        )
        server = EndpointConfig(
            role=Role.SERVER,
            credentials={server_kind: self.pool.pick(server_kind)},
            client_cert_types=(client_kind,) if client_kind else (),
            server_cert_types=(server_kind,),
            resolver=self._resolver(spec),
            request_client_auth=spec.mutual,
            rfc7250_enabled=not spec.legacy_server,
            **common,
        )
        return client, server

    async def run_once(self, spec: ScenarioSpec) -> HandshakeResult:
        client, server = self.endpoint_configs(spec)
        if spec.transport == "tcp":
            transports = await tcp_pair()
        else:
            transports = MemoryTransport.pair()
        try:
            return await run_handshake(client, server, transports, timeout=self.timeout)
        finally:
            for t in transports:
                await t.close()

    @staticmethod
    def sample(result: HandshakeResult) -> RunSample:
        c, s = result.client_metrics, result.server_metrics
        return RunSample(
            latency=c.wall_clock,
            resolve_seconds=c.resolve_seconds + s.resolve_seconds,
            client_bytes=c.bytes_sent,
            server_bytes=s.bytes_sent,
            objects_s2c=s.objects_sent,
            objects_c2s=c.objects_sent,
            client_resolves=c.did_resolves,
            server_resolves=s.did_resolves,
        )

    @staticmethod
    def check_laws(spec: ScenarioSpec, sample: RunSample) -> list[str]:
        problems = []
        checks = (
            ("client resolves", sample.client_resolves, spec.expected_client_resolves()),
            ("server resolves", sample.server_resolves, spec.expected_server_resolves()),
            ("server->client identity bytes", sample.objects_s2c, spec.expected_objects_server_to_client()),
            ("client->server identity bytes", sample.objects_c2s, spec.expected_objects_client_to_server()),
        )
        for label, got, want in checks:
            if got != want:
                problems.append(f"{label}: got {got}, expected {want}")
        return problems

    async def run_scenario(self, spec: ScenarioSpec) -> ScenarioReport:
        report = ScenarioReport(
            name=spec.name,
            flow=spec.flow,
            client_cred=spec.client_cred,
            server_cred=spec.server_cred,
            resolver=spec.resolver,
            pinning=spec.pinning,
            transport=spec.transport,
            legacy_server=spec.legacy_server,
            repetitions=spec.repetitions,
        )
        gate = asyncio.Semaphore(self.workers)
        samples: list[RunSample] = []

        async def one(i: int):
            async with gate:
                try:
                    result = await self.run_once(spec)
                except HandshakeAlert as e:
                    report.violations.append(f"run {i}: handshake failed with {e.alert_name}: {e}")
                    return
            sample = self.sample(result)
            samples.append(sample)
            for problem in self.check_laws(spec, sample):
                report.violations.append(f"run {i}: {problem}")

        await asyncio.gather(*(one(i) for i in range(spec.repetitions)))

        report.completed = len(samples)
        if samples:
            latencies = [s.latency * 1000 for s in samples]
            report.latency_mean_ms = statistics.fmean(latencies)
            report.latency_stdev_ms = statistics.stdev(latencies) if len(latencies) > 1 else 0.0
            report.resolve_mean_ms = statistics.fmean(s.resolve_seconds * 1000 for s in samples)
            report.server_bytes_sent_mean = statistics.fmean(s.server_bytes for s in samples)
            report.client_bytes_sent_mean = statistics.fmean(s.client_bytes for s in samples)
            report.objects_server_to_client = samples[0].objects_s2c
            report.objects_client_to_server = samples[0].objects_c2s
            report.client_resolves = sum(s.client_resolves for s in samples)
            report.server_resolves = sum(s.server_resolves for s in samples)
        report.did_resolves = report.client_resolves + report.server_resolves

        expected_total = spec.repetitions * (spec.expected_client_resolves() + spec.expected_server_resolves())
        if report.did_resolves != expected_total:
            report.violations.append(f"did_resolves total {report.did_resolves}, expected {expected_total}")
        log.info(
            "Scenario %s: %s/%s runs, %.2f ms mean, %s resolves",
            spec.name, report.completed, spec.repetitions, report.latency_mean_ms, report.did_resolves,
        )
        return report

    async def run(self, specs: Iterable[ScenarioSpec]) -> list[ScenarioReport]:
        return [await self.run_scenario(spec) for spec in specs]


def write_records(path: str, reports: Iterable[ScenarioReport]):
    with open(path, "w", encoding="utf-8") as f:
        for report in reports:
            f.write(json.dumps(report.to_record(), sort_keys=True) + "\n")


async def run_bench(
    specs: list[ScenarioSpec],
    pool_size: int = 32,
    workers: int = 1,
    seed: Optional[int] = None,
    codepoints: Codepoints = Codepoints(),
    methods: DidMethodTable = DEFAULT_DID_METHODS,
    validity: timedelta = timedelta(days=365),
    timeout: float = 10.0,
) -> list[ScenarioReport]:
    """
    Builds a fresh in-memory registry and credential pool, then runs every
    scenario. Raises LawViolation after all scenarios ran if any law failed.
    """
    rng = random.Random(seed)
    registry_keys = IdentityKeyPair.generate(rng.randbytes(32))
    async with Ledger(":memory:") as ledger:
        pool = await CredentialPool(rng).build(ledger, pool_size, utcnow(), validity, methods)
        runner = BenchRunner(ledger, registry_keys, pool, codepoints, methods, workers, timeout)
        reports = await runner.run(specs)

    broken = [r for r in reports if r.violations]
    if broken:
        details = "; ".join(f"{r.name}: {r.violations[0]}" for r in broken)
        raise LawViolation(f"{len(broken)} scenario(s) broke a law: {details}", reports)
    return reports
