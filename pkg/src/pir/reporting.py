"""Render a completed review as canonical JSON and Markdown.

The JSON form is byte-deterministic for identical state (sorted keys, fixed
float precision, defined array orders), so replay runs can be compared by
digest. Every conclusion row in the trace ledger must resolve against the
ingested evidence and policy clauses; an unresolvable citation aborts
rendering rather than shipping an audit artifact with dangling references.
"""

from __future__ import annotations

import json
import typing
from dataclasses import dataclass, field
from datetime import datetime

from .canon import canon_dumps, digest_of, format_instant, parse_instant
from .detection import BehaviorFinding
from .errors import UnresolvedReferenceError
from .llm_gateway import EVT_MARKER, POL_MARKER, Transcript
from .attack_catalog import TechniqueMapping
from .gap_analysis import PolicyGap

if typing.TYPE_CHECKING:
    from .orchestrator import ReviewState

REPORT_SCHEMA_VERSION = 1

KIND_FINDING = "finding"
KIND_MAPPING = "mapping"
KIND_GAP = "gap"

# Dict keys whose string (or list-of-string) values are structural citations,
# used by the re-parse closure check over a rendered report.
_RECORD_REF_KEYS = frozenset(
    {
        "event_refs",
        "evidence",
        "evidence_events",
        "record_refs",
        "record_ref",
        "success_record",
        "success_record_ref",
        "injected_record_refs",
    }
)
_CLAUSE_REF_KEYS = frozenset(
    {"clause_refs", "evidence_clauses", "clause_ids", "clause_ref", "clause_id"}
)


@dataclass
class TraceRow:
    """One conclusion with the references that support it."""

    conclusion_id: str
    conclusion_kind: str
    event_refs: list[str]
    clause_refs: list[str]
    confidence: str | None = None

    def to_dict(self) -> dict:
        return {
            "conclusion_id": self.conclusion_id,
            "conclusion_kind": self.conclusion_kind,
            "event_refs": list(self.event_refs),
            "clause_refs": list(self.clause_refs),
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceRow":
        return cls(
            conclusion_id=d["conclusion_id"],
            conclusion_kind=d["conclusion_kind"],
            event_refs=list(d["event_refs"]),
            clause_refs=list(d["clause_refs"]),
            confidence=d.get("confidence"),
        )


@dataclass
class ReviewReport:
    run_id: str
    config_digest: str
    generated_at: datetime
    incident_summary: str
    findings: list[BehaviorFinding]
    finding_summaries: list[str]
    technique_section: list[TechniqueMapping]
    gaps_section: list[PolicyGap]
    trace_ledger: list[TraceRow]
    evidence_appendix: list[dict]
    transcripts: list[Transcript]
    degradation_notes: list[str]
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "run_id": self.run_id,
            "config_digest": self.config_digest,
            "generated_at": format_instant(self.generated_at),
            "incident_summary": self.incident_summary,
            "findings": [f.to_dict() for f in self.findings],
            "finding_summaries": list(self.finding_summaries),
            "technique_section": [m.to_dict() for m in self.technique_section],
            "gaps_section": [g.to_dict() for g in self.gaps_section],
            "trace_ledger": [r.to_dict() for r in self.trace_ledger],
            "evidence_appendix": [dict(row) for row in self.evidence_appendix],
            "transcripts": [t.to_dict() for t in self.transcripts],
            "degradation_notes": list(self.degradation_notes),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReviewReport":
        return cls(
            run_id=d["run_id"],
            config_digest=d["config_digest"],
            generated_at=parse_instant(d["generated_at"]),
            incident_summary=d["incident_summary"],
            findings=[BehaviorFinding.from_dict(x) for x in d["findings"]],
            finding_summaries=list(d["finding_summaries"]),
            technique_section=[
                TechniqueMapping.from_dict(x) for x in d["technique_section"]
            ],
            gaps_section=[PolicyGap.from_dict(x) for x in d["gaps_section"]],
            trace_ledger=[TraceRow.from_dict(x) for x in d["trace_ledger"]],
            evidence_appendix=[dict(x) for x in d["evidence_appendix"]],
            transcripts=[Transcript.from_dict(x) for x in d["transcripts"]],
            degradation_notes=list(d["degradation_notes"]),
            notes=list(d.get("notes", [])),
        )


def conclusion_ids(state: "ReviewState") -> dict[str, list[str]]:
    return {
        KIND_FINDING: [f"finding-{i + 1:03d}" for i in range(len(state.findings))],
        KIND_MAPPING: [f"mapping-{i + 1:03d}" for i in range(len(state.mappings))],
        KIND_GAP: [f"gap-{i + 1:03d}" for i in range(len(state.gaps))],
    }


def build_trace_ledger(state: "ReviewState") -> list[TraceRow]:
    """One row per finding, mapping, and gap; every reference must resolve.

    Rows come back sorted by (conclusion_kind, conclusion_id).
    """
    rows: list[TraceRow] = []
    for i, finding in enumerate(state.findings):
        refs = list(finding.evidence)
        if finding.success_record:
            refs.append(finding.success_record)
        rows.append(
            TraceRow(f"finding-{i + 1:03d}", KIND_FINDING, refs, [], None)
        )
    for i, mapping in enumerate(state.mappings):
        rows.append(
            TraceRow(
                f"mapping-{i + 1:03d}", KIND_MAPPING, list(mapping.evidence), [], None
            )
        )
    for i, gap in enumerate(state.gaps):
        rows.append(
            TraceRow(
                f"gap-{i + 1:03d}",
                KIND_GAP,
                list(gap.evidence_events),
                list(gap.evidence_clauses),
                gap.confidence,
            )
        )

    known_refs = state.record_refs()
    known_clauses = state.clause_ids()
    for row in rows:
        if not row.event_refs and not row.clause_refs:
            raise UnresolvedReferenceError(
                f"{row.conclusion_id} carries no supporting references"
            )
        for ref in row.event_refs:
            if ref not in known_refs:
                raise UnresolvedReferenceError(
                    f"{row.conclusion_id} cites unknown record ref {ref!r}"
                )
        for cid in row.clause_refs:
            if cid not in known_clauses:
                raise UnresolvedReferenceError(
                    f"{row.conclusion_id} cites unknown clause id {cid!r}"
                )
    rows.sort(key=lambda r: (r.conclusion_kind, r.conclusion_id))
    return rows


def _scan_narrative(
    label: str, text: str, known_refs: set[str], known_clauses: set[str]
) -> None:
    for ref in EVT_MARKER.findall(text or ""):
        if ref not in known_refs:
            raise UnresolvedReferenceError(
                f"{label} cites unknown record ref {ref!r}"
            )
    for cid in POL_MARKER.findall(text or ""):
        if cid not in known_clauses:
            raise UnresolvedReferenceError(
                f"{label} cites unknown clause id {cid!r}"
            )


def build_report(state: "ReviewState", generated_at: datetime) -> ReviewReport:
    """Assemble the report document, enforcing citation closure over the
    ledger and every accepted narrative.

    Transcripts are exempt from enforcement: a degraded transcript records
    the rejected model output, fabricated citations included, as the audit
    trail of why the fallback text was used.
    """
    ledger = build_trace_ledger(state)

    known_refs = state.record_refs()
    known_clauses = state.clause_ids()
    _scan_narrative(
        "incident summary", state.incident_summary or "", known_refs, known_clauses
    )
    for i, summary in enumerate(state.finding_summaries):
        _scan_narrative(f"finding-{i + 1:03d} summary", summary, known_refs, known_clauses)
    for i, mapping in enumerate(state.mappings):
        _scan_narrative(
            f"mapping-{i + 1:03d} rationale", mapping.rationale, known_refs, known_clauses
        )
    for i, gap in enumerate(state.gaps):
        _scan_narrative(
            f"gap-{i + 1:03d} rationale", gap.rationale, known_refs, known_clauses
        )
        _scan_narrative(
            f"gap-{i + 1:03d} remediation", gap.remediation, known_refs, known_clauses
        )

    appendix = [
        {
            "record_ref": r.record_ref,
            "event_id": r.event_id,
            "timestamp_utc": format_instant(r.timestamp_utc),
            "digest": digest_of(r.to_dict()),
        }
        for r in state.records
    ]
    return ReviewReport(
        run_id=state.run_id,
        config_digest=state.config_digest,
        generated_at=generated_at,
        incident_summary=state.incident_summary or "",
        findings=list(state.findings),
        finding_summaries=list(state.finding_summaries),
        technique_section=list(state.mappings),
        gaps_section=list(state.gaps),
        trace_ledger=ledger,
        evidence_appendix=appendix,
        transcripts=list(state.transcripts),
        degradation_notes=list(state.degradation_notes),
        notes=list(state.notes),
    )


def render_json(state: "ReviewState") -> str:
    """Canonical JSON text of the report (trailing newline included).

    The document is always re-derived from the state so citation closure is
    enforced even when re-rendering a checkpoint; the recorded generation
    time is reused, which keeps clean re-renders byte-identical.
    """
    if state.report is not None:
        report = build_report(state, generated_at=state.report.generated_at)
    else:
        from .canon import utc_now

        report = build_report(state, generated_at=utc_now())
    return canon_dumps(report.to_dict()) + "\n"


def report_digest(report: ReviewReport) -> str:
    """Digest of the report with the clock field masked."""
    doc = report.to_dict()
    doc["generated_at"] = None
    return digest_of(doc)


def json_report_digest(text: str) -> str:
    """Same masking applied to an already-rendered report.json."""
    doc = json.loads(text)
    doc["generated_at"] = None
    return digest_of(doc)


def collect_citations(doc) -> tuple[list[str], list[str]]:
    """Every record ref and clause id cited anywhere in a parsed report:
    structural reference fields plus citation markers inside any string."""
    refs: dict[str, None] = {}
    clauses: dict[str, None] = {}

    def take(bucket: dict[str, None], value) -> None:
        if isinstance(value, str):
            bucket[value] = None
        elif isinstance(value, list):
            for item in value:
                if isinstance(item, str):
                    bucket[item] = None

    def walk(node) -> None:
        if isinstance(node, dict):
            for key, value in node.items():
                if key in _RECORD_REF_KEYS:
                    take(refs, value)
                elif key in _CLAUSE_REF_KEYS:
                    take(clauses, value)
                else:
                    walk(value)
        elif isinstance(node, list):
            for item in node:
                walk(item)
        elif isinstance(node, str):
            for ref in EVT_MARKER.findall(node):
                refs[ref] = None
            for cid in POL_MARKER.findall(node):
                clauses[cid] = None

    walk(doc)
    return list(refs), list(clauses)


def verify_citation_closure(
    doc: dict, known_refs: set[str], known_clauses: set[str]
) -> list[str]:
    """Re-parse closure check: returns the citations that fail to resolve."""
    refs, clauses = collect_citations(doc)
    missing = [r for r in refs if r not in known_refs]
    missing.extend(c for c in clauses if c not in known_clauses)
    return missing


def _md_escape(text: str) -> str:
    return text.replace("|", "\\|")


def _md_table(headers: list[str], rows: list[list[str]]) -> list[str]:
    lines = [
        "| " + " | ".join(headers) + " |",
        "| " + " | ".join("---" for _ in headers) + " |",
    ]
    for row in rows:
        lines.append("| " + " | ".join(_md_escape(cell) for cell in row) + " |")
    return lines


def render_markdown(state: "ReviewState") -> str:
    """Human-readable rendering; fixed section order, same content as JSON.

    Like render_json, the document is re-derived from the state so a
    tampered checkpoint cannot bypass citation closure.
    """
    if state.report is not None:
        report = build_report(state, generated_at=state.report.generated_at)
    else:
        from .canon import utc_now

        report = build_report(state, generated_at=utc_now())

    lines: list[str] = []
    lines.append("# Post-Incident Review")
    lines.append("")
    lines.append(f"- Run: `{report.run_id}`")
    lines.append(f"- Generated: {format_instant(report.generated_at)}")
    lines.append(f"- Config digest: `{report.config_digest}`")
    lines.append("")

    lines.append("## Incident Summary")
    lines.append("")
    lines.append(report.incident_summary)
    lines.append("")
    if report.findings:
        for i, (finding, summary) in enumerate(
            zip(report.findings, report.finding_summaries)
        ):
            lines.append(
                f"### finding-{i + 1:03d}: {finding.kind} "
                f"('{finding.account}', {finding.failure_count} failures)"
            )
            lines.append("")
            lines.append(summary)
            lines.append("")
    else:
        lines.append(
            "No findings: the evidence contains no qualifying authentication "
            "behaviour."
        )
        lines.append("")

    lines.append("## Technique Attribution")
    lines.append("")
    if report.technique_section:
        for i, mapping in enumerate(report.technique_section):
            lines.append(
                f"### mapping-{i + 1:03d}: {mapping.technique_id} "
                f"{mapping.technique_name} (tactic: {mapping.tactic})"
            )
            lines.append("")
            lines.append(mapping.rationale)
            lines.append("")
    else:
        lines.append("No technique attribution: nothing to map.")
        lines.append("")

    lines.append("## Policy Gap Findings")
    lines.append("")
    if report.gaps_section:
        for i, gap in enumerate(report.gaps_section):
            lines.append(
                f"### gap-{i + 1:03d}: {gap.control} ({gap.gap_kind}, "
                f"severity {gap.severity})"
            )
            lines.append("")
            lines.append(f"- Confidence: {gap.confidence}")
            lines.append(f"- Rationale: {gap.rationale}")
            lines.append(f"- Remediation: {gap.remediation}")
            lines.append("")
    else:
        lines.append("No policy gaps identified against baseline.")
        lines.append("")

    lines.append("## Trace Ledger")
    lines.append("")
    if report.trace_ledger:
        lines.extend(
            _md_table(
                ["Conclusion", "Kind", "Event refs", "Clause refs", "Confidence"],
                [
                    [
                        row.conclusion_id,
                        row.conclusion_kind,
                        ", ".join(row.event_refs) or "-",
                        ", ".join(row.clause_refs) or "-",
                        row.confidence or "-",
                    ]
                    for row in report.trace_ledger
                ],
            )
        )
    else:
        lines.append("Empty: no conclusions were drawn.")
    lines.append("")

    lines.append("## Evidence Appendix")
    lines.append("")
    if report.evidence_appendix:
        lines.extend(
            _md_table(
                ["Record ref", "Event ID", "Timestamp (UTC)", "Digest"],
                [
                    [
                        row["record_ref"],
                        str(row["event_id"]),
                        row["timestamp_utc"],
                        row["digest"][:16],
                    ]
                    for row in report.evidence_appendix
                ],
            )
        )
    else:
        lines.append("No event records were ingested.")
    lines.append("")

    lines.append("## Degradation Notes")
    lines.append("")
    if report.degradation_notes:
        for note in report.degradation_notes:
            lines.append(f"- {note}")
    else:
        lines.append("None: no narrative fell back to deterministic text.")
    lines.append("")

    return "\n".join(lines)


def deterministic_incident_summary(state: "ReviewState") -> str:
    """Clock-free fallback incident summary built from structured state."""
    if not state.findings:
        return (
            f"Review of {len(state.records)} event record(s) found no "
            f"qualifying authentication behaviour; no technique mapping or "
            f"policy gap analysis was performed."
        )
    parts: list[str] = []
    for finding in state.findings:
        span = int(
            (finding.window_end - finding.window_start).total_seconds()
        )
        sentence = (
            f"Account '{finding.account}' recorded {finding.failure_count} "
            f"failed logons within {span} seconds "
            f"([EVT:{finding.evidence[0]}] through [EVT:{finding.evidence[-1]}])"
        )
        if finding.success_record:
            sentence += (
                f", followed by a successful logon [EVT:{finding.success_record}]"
            )
        parts.append(sentence + ".")
    if state.mappings:
        ids = ", ".join(
            f"{m.technique_id} ({m.technique_name})" for m in state.mappings
        )
        parts.append(f"The behaviour maps to {ids}.")
    if state.gaps:
        gap_bits = ", ".join(
            f"{g.control} ({g.gap_kind}, severity {g.severity})" for g in state.gaps
        )
        parts.append(f"Policy comparison against baseline identified: {gap_bits}.")
    else:
        parts.append("No policy gaps were identified against the baseline.")
    return " ".join(parts)
