from typing import Iterable, Optional

from .wire import Codepoints


def cert_type_name(code: Optional[int], codepoints: Codepoints) -> str:
    if code is None:
        return "-"
    kind = codepoints.kind_for(code)
    return kind.value if kind else f"type-{code}"


def msg_identity_created(did: str, out_dir: str) -> str:
    return f"created {did} in {out_dir}"


def msg_vc_issued(vc_id: str, subject: str, path: str) -> str:
    return f"issued {vc_id} to {subject} -> {path}"


def msg_chain_created(leaf: str, out_dir: str) -> str:
    return f"created chain for {leaf!r} in {out_dir}"


def msg_registry_listening(url: str, mode: str) -> str:
    return f"resolver service on {url} ({mode})"


def msg_alert(role: str, alert: str, detail: str) -> str:
    return f"{role}: handshake aborted with {alert}: {detail}"


def msg_attack_succeeded(did: str) -> str:
    return f"attack succeeded: the forged document for {did} was accepted and the attacker key passed CertificateVerify"


def msg_attack_blocked(alert: str, detail: str) -> str:
    return f"defense held: victim aborted with {alert} ({detail})"


def msg_attack_unexpected(mode: str, detail: str) -> str:
    return f"unexpected outcome in {mode} mode: {detail}"


def msg_attack_inapplicable(cred: str) -> str:
    return f"scenario inapplicable: {cred} credentials never touch the DID resolver"


def format_metrics(role: str, outcome, metrics, codepoints: Codepoints) -> str:
    lines = [
        f"{role}: handshake complete",
        f"  server_cert_type   {cert_type_name(outcome.server_cert_type, codepoints)}",
        f"  client_cert_type   {cert_type_name(outcome.client_cert_type, codepoints)}",
        f"  did_methods        {','.join(str(m) for m in outcome.shared_did_methods) or '-'}",
        f"  fallback           {'yes' if outcome.fallback else 'no'}",
        f"  bytes sent         {metrics.bytes_sent}",
        f"  bytes received     {metrics.bytes_received}",
        f"  identity objects   sent {metrics.objects_sent} B ({metrics.keys_sent} pk, {metrics.signatures_sent} sig), "
        f"received {metrics.objects_received} B",
        f"  did_resolves       {metrics.did_resolves} ({metrics.resolve_seconds * 1000:.2f} ms)",
        f"  wall clock         {metrics.wall_clock * 1000:.2f} ms",
    ]
    return "\n".join(lines)


def _scenario_label(report) -> str:
    if report.flow == "mutual":
        label = f"{report.client_cred}/{report.server_cred}"
    else:
        label = report.server_cred
    if report.legacy_server:
        label += " fallback"
    return label


def format_bench_table(reports: Iterable) -> str:
    """
    Three blocks: identity objects sent, latency with resolutions, and the
    mutual flows with mixed credential types.
    """
    reports = list(reports)
    out = ["Identity objects [bytes]"]
    out.append(f"  {'scenario':<28} {'flow':<11} {'server->client':>15} {'client->server':>15} {'server bytes':>13}")
    for r in reports:
        out.append(
            f"  {r.name:<28} {r.flow:<11} {r.objects_server_to_client:>15} {r.objects_client_to_server:>15} "
            f"{r.server_bytes_sent_mean:>13.0f}"
        )

    out.append("")
    out.append("Handshake latency and DID resolutions")
    out.append(
        f"  {'scenario':<28} {'creds':<16} {'resolver':<14} {'pin':<4} {'runs':>6} "
        f"{'mean ms':>9} {'stdev':>8} {'resolve ms':>11} {'resolves':>9}"
    )
    for r in reports:
        out.append(
            f"  {r.name:<28} {_scenario_label(r):<16} {r.resolver:<14} {'on' if r.pinning else 'off':<4} "
            f"{r.completed:>6} {r.latency_mean_ms:>9.2f} {r.latency_stdev_ms:>8.2f} "
            f"{r.resolve_mean_ms:>11.2f} {r.did_resolves:>9}"
        )

    hybrid = [r for r in reports if r.flow == "mutual" and r.client_cred != r.server_cred]
    if hybrid:
        out.append("")
        out.append("Hybrid handshakes")
        out.append(f"  {'client':<8} {'server':<8} {'mean ms':>9} {'client resolves':>16} {'server resolves':>16}")
        for r in hybrid:
            out.append(
                f"  {r.client_cred:<8} {r.server_cred:<8} {r.latency_mean_ms:>9.2f} "
                f"{r.client_resolves:>16} {r.server_resolves:>16}"
            )

    failing = [r for r in reports if r.violations]
    if failing:
        out.append("")
        out.append("Law violations")
        for r in failing:
            for v in r.violations[:5]:
                out.append(f"  {r.name}: {v}")
    return "\n".join(out)
