"""Offline audit of a transfer trace and a noticeboard export."""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set

import structlog

from errors import ChainError, FinalizeRejected, SpawnRejected
from factory import SpawnContext
from noticeboard import ANNOUNCE, NoticeboardExport, finalize_check, load_export, rendezvous_token
from simulator import EPHEMERAL_ROLES, ROLE_I1, ROLE_I2, ROLE_STORAGE, WORLD_ACTOR, TraceRecord, role_of

logger = structlog.get_logger(__name__)


@dataclass
class ObservationReport:
    endpoints: Dict[str, str] = field(default_factory=dict)          # principal -> side
    observations: Dict[str, Set[str]] = field(default_factory=dict)  # ephemeral id -> endpoint principals
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class AuditReport:
    observation: ObservationReport
    chain_ok: bool = False
    finalized: Dict[int, bool] = field(default_factory=dict)
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.chain_ok and not self.violations and self.observation.ok

    def lines(self) -> List[str]:
        out = [f"chain: {'ok' if self.chain_ok else 'BROKEN'}"]
        for idx, accepted in sorted(self.finalized.items()):
            out.append(f"finalize idx={idx}: {'accept' if accepted else 'reject'}")
        for actor, seen in sorted(self.observation.observations.items()):
            out.append(f"observed {actor}: {', '.join(sorted(seen)) or '-'}")
        out.extend(f"violation: {v}" for v in self.observation.violations + self.violations)
        return out


def load_trace(path: str) -> List[TraceRecord]:
    with open(path, 'r') as f:
        return [TraceRecord.from_line(line) for line in f if line.strip()]


def audit_observation_logs(records: Iterable[TraceRecord]) -> ObservationReport:
    """Per ephemeral actor, which endpoint principals reached it; flag any actor that saw both sides."""
    records = list(records)
    report = ObservationReport()
    for record in records:
        if record.actor == WORLD_ACTOR and record.kind == "endpoint":
            report.endpoints[record.get("principal")] = record.get("side")

    for record in records:
        if record.kind != "recv" or role_of(record.actor) not in EPHEMERAL_ROLES:
            continue
        src = record.get("src", "")
        seen = report.observations.setdefault(record.actor, set())
        if src in report.endpoints:
            seen.add(src)
        if role_of(record.actor) == ROLE_STORAGE and role_of(src) not in (ROLE_I1, ROLE_I2):
            report.violations.append(f"storage-contact: {record.actor} reached by {src}")

    for actor, seen in sorted(report.observations.items()):
        sides = {report.endpoints[p] for p in seen}
        if len(sides) > 1:
            report.violations.append(f"linked: {actor} observed both endpoints")
    if report.violations:
        logger.warning("audit.violations", count=len(report.violations))
    return report


def spawn_contexts(records: Iterable[TraceRecord]) -> List[SpawnContext]:
    contexts = []
    for record in records:
        if record.kind == "spawn-context":
            contexts.append(SpawnContext.from_bytes(bytes.fromhex(record.get("context"))))
    return contexts


# Announce index whose rendezvous token routes to this context's I2
def announce_index(export: NoticeboardExport, context: SpawnContext) -> Optional[int]:
    i2_id = context.id_of(ROLE_I2)
    for record in export.records:
        if record.kind == ANNOUNCE and record.body.get("rendezvous_token") == rendezvous_token(record.idx, i2_id).hex():
            return record.idx
    return None


def audit_records(records: List[TraceRecord], export: NoticeboardExport) -> AuditReport:
    report = AuditReport(audit_observation_logs(records))
    try:
        export.verify()
        report.chain_ok = True
    except ChainError as e:
        report.violations.append(f"chain: {e.reason}")

    for context in spawn_contexts(records):
        idx = announce_index(export, context)
        if idx is None:
            report.violations.append(f"no-announce: {context.deposit_id}")
            continue
        try:
            report.finalized[idx] = finalize_check(export, idx, context)
        except (FinalizeRejected, SpawnRejected) as e:
            report.finalized[idx] = False
            report.violations.append(f"finalize idx={idx}: {e.reason}")
    return report


def audit_artifacts(trace_path: str, export_path: str) -> AuditReport:
    report = audit_records(load_trace(trace_path), load_export(export_path))
    logger.info("audit.done", ok=report.ok, violations=len(report.violations))
    return report
