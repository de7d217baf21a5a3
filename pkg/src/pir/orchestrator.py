"""Fixed five-stage review pipeline over an append-only shared state.

Stages run strictly in order: ProcessEvidence, MapAttack, RetrievePolicies,
ValidatePolicies, GenerateReport. Each stage extends a copy of the incoming
state and never rewrites fields owned by earlier stages; run_review persists
a canonical JSON checkpoint after every stage under <output>/state/.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from . import reporting
from .attack_catalog import Catalog, TechniqueMapping, justify_mapping, load_catalog, load_default_catalog, map_finding
from .canon import canon_dumps, digest_of, format_instant, parse_instant, utc_now
from .config import ReviewConfig
from .detection import (
    BehaviorFinding,
    detect_bruteforce,
    fallback_summary,
    narrative_for_finding,
)
from .errors import (
    ConfigInvalidError,
    ReviewError,
    StageFailureError,
    StageOrderViolationError,
)
from .gap_analysis import (
    ControlParameter,
    PolicyGap,
    assign_confidence,
    compare_controls,
    dedupe_gaps,
    draft_rationale,
    extract_control_parameters,
    load_default_rules,
    select_effective,
)
from .llm_gateway import Gateway, GatewaySettings, MODE_DISABLED, NarrativeResult, Transcript
from .log_ingest import (
    AuthEvent,
    EventRecord,
    load_csv,
    normalize_auth_events,
    parse_event_xml,
    validate_evtx_container,
)
from .policy_index import (
    DOC_KIND_BASELINE,
    DOC_KIND_ORGANISATION,
    PolicyDocument,
    RetrievalHit,
    build_index,
    retrieve,
    technique_query,
)

logger = logging.getLogger(__name__)

STAGES = (
    "ProcessEvidence",
    "MapAttack",
    "RetrievePolicies",
    "ValidatePolicies",
    "GenerateReport",
)

STATUS_OK = "ok"
STATUS_SKIPPED = "skipped"
STATUS_FAILED = "failed"


@dataclass
class StageRecord:
    stage: str
    started: datetime
    finished: datetime | None = None
    status: str = STATUS_OK
    note: str | None = None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "started": format_instant(self.started),
            "finished": format_instant(self.finished) if self.finished else None,
            "status": self.status,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageRecord":
        return cls(
            stage=d["stage"],
            started=parse_instant(d["started"]),
            finished=parse_instant(d["finished"]) if d["finished"] else None,
            status=d["status"],
            note=d.get("note"),
        )


@dataclass
class ReviewState:
    """Shared state threaded through the stages; append-only by contract."""

    run_id: str
    config_digest: str
    records: list[EventRecord] = field(default_factory=list)
    auth_events: list[AuthEvent] = field(default_factory=list)
    skipped_auth_records: int = 0
    findings: list[BehaviorFinding] = field(default_factory=list)
    finding_summaries: list[str] = field(default_factory=list)
    mappings: list[TechniqueMapping] = field(default_factory=list)
    policy_documents: list[PolicyDocument] = field(default_factory=list)
    retrieval_query: str | None = None
    retrieval: list[RetrievalHit] = field(default_factory=list)
    org_params: list[ControlParameter] = field(default_factory=list)
    baseline_params: list[ControlParameter] = field(default_factory=list)
    gaps: list[PolicyGap] = field(default_factory=list)
    transcripts: list[Transcript] = field(default_factory=list)
    stage_log: list[StageRecord] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    degradation_notes: list[str] = field(default_factory=list)
    incident_summary: str | None = None
    report: "reporting.ReviewReport | None" = None

    def copy(self) -> "ReviewState":
        """Shallow copy with fresh list containers (items are shared; earlier
        stages' items are never mutated)."""
        return dataclasses.replace(
            self,
            records=list(self.records),
            auth_events=list(self.auth_events),
            findings=list(self.findings),
            finding_summaries=list(self.finding_summaries),
            mappings=list(self.mappings),
            policy_documents=list(self.policy_documents),
            retrieval=list(self.retrieval),
            org_params=list(self.org_params),
            baseline_params=list(self.baseline_params),
            gaps=list(self.gaps),
            transcripts=list(self.transcripts),
            stage_log=list(self.stage_log),
            notes=list(self.notes),
            degradation_notes=list(self.degradation_notes),
        )

    def record_refs(self) -> set[str]:
        return {r.record_ref for r in self.records}

    def clause_ids(self) -> set[str]:
        return {
            c.clause_id for doc in self.policy_documents for c in doc.clauses
        }

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_digest": self.config_digest,
            "records": [r.to_dict() for r in self.records],
            "auth_events": [e.to_dict() for e in self.auth_events],
            "skipped_auth_records": self.skipped_auth_records,
            "findings": [f.to_dict() for f in self.findings],
            "finding_summaries": list(self.finding_summaries),
            "mappings": [m.to_dict() for m in self.mappings],
            "policy_documents": [d.to_dict() for d in self.policy_documents],
            "retrieval_query": self.retrieval_query,
            "retrieval": [h.to_dict() for h in self.retrieval],
            "org_params": [p.to_dict() for p in self.org_params],
            "baseline_params": [p.to_dict() for p in self.baseline_params],
            "gaps": [g.to_dict() for g in self.gaps],
            "transcripts": [t.to_dict() for t in self.transcripts],
            "stage_log": [s.to_dict() for s in self.stage_log],
            "notes": list(self.notes),
            "degradation_notes": list(self.degradation_notes),
            "incident_summary": self.incident_summary,
            "report": self.report.to_dict() if self.report else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReviewState":
        clause_by_id = {}
        docs = [PolicyDocument.from_dict(x) for x in d["policy_documents"]]
        for doc in docs:
            for clause in doc.clauses:
                clause_by_id[clause.clause_id] = clause
        hits = []
        for h in d["retrieval"]:
            hits.append(
                RetrievalHit(
                    clause=clause_by_id[h["clause_id"]],
                    score=float(h["score"]),
                    rank=int(h["rank"]),
                )
            )
        return cls(
            run_id=d["run_id"],
            config_digest=d["config_digest"],
            records=[EventRecord.from_dict(x) for x in d["records"]],
            auth_events=[AuthEvent.from_dict(x) for x in d["auth_events"]],
            skipped_auth_records=int(d["skipped_auth_records"]),
            findings=[BehaviorFinding.from_dict(x) for x in d["findings"]],
            finding_summaries=list(d["finding_summaries"]),
            mappings=[TechniqueMapping.from_dict(x) for x in d["mappings"]],
            policy_documents=docs,
            retrieval_query=d.get("retrieval_query"),
            retrieval=hits,
            org_params=[ControlParameter.from_dict(x) for x in d["org_params"]],
            baseline_params=[
                ControlParameter.from_dict(x) for x in d["baseline_params"]
            ],
            gaps=[PolicyGap.from_dict(x) for x in d["gaps"]],
            transcripts=[Transcript.from_dict(x) for x in d["transcripts"]],
            stage_log=[StageRecord.from_dict(x) for x in d["stage_log"]],
            notes=list(d["notes"]),
            degradation_notes=list(d["degradation_notes"]),
            incident_summary=d.get("incident_summary"),
            report=(
                reporting.ReviewReport.from_dict(d["report"]) if d["report"] else None
            ),
        )


def state_digest(state: ReviewState) -> str:
    """Digest of the state with volatile clock fields masked, so identical
    replay runs compare equal."""
    d = state.to_dict()
    for entry in d["stage_log"]:
        entry["started"] = None
        entry["finished"] = None
    for t in d["transcripts"]:
        t["latency_ms"] = 0
    if d["report"]:
        d["report"]["generated_at"] = None
        for t in d["report"]["transcripts"]:
            t["latency_ms"] = 0
    return digest_of(d)


def field_digests(state: ReviewState) -> dict[str, str]:
    """Per-field digests (volatile fields excluded) for append-only checks."""
    d = state.to_dict()
    d.pop("stage_log")
    d.pop("report")
    out = {}
    for key, value in d.items():
        if key == "transcripts":
            value = [dict(t, latency_ms=0) for t in value]
        out[key] = digest_of(value)
    return out


@dataclass
class StageDeps:
    config: ReviewConfig
    gateway: Gateway
    catalog: Catalog


def build_deps(config: ReviewConfig, transport=None) -> StageDeps:
    settings = GatewaySettings.from_env(
        mode=config.gateway_mode,
        cache_dir=config.cache_dir,
        params=config.generation,
    )
    gateway = Gateway(settings, transport=transport)
    if config.catalog_path is not None:
        catalog = load_catalog(config.catalog_path.read_text(encoding="utf-8"))
    else:
        catalog = load_default_catalog()
    return StageDeps(config=config, gateway=gateway, catalog=catalog)


def _absorb(state: ReviewState, result: NarrativeResult) -> None:
    if result.transcript is not None:
        state.transcripts.append(result.transcript)
    if result.degraded and result.note:
        state.degradation_notes.append(result.note)


# --- stage bodies -----------------------------------------------------------


def _stage_process_evidence(state: ReviewState, deps: StageDeps):
    config = deps.config
    for path in config.evidence_paths:
        suffix = path.suffix.lower()
        if suffix == ".evtx":
            summary = validate_evtx_container(path.read_bytes(), path.name)
            state.notes.append(
                f"container {path.name}: {summary.chunk_count} chunk(s), "
                f"{summary.declared_record_count} declared record(s); framing "
                f"validated, records not decoded"
            )
            for warning in summary.warnings:
                state.notes.append(f"container {path.name}: {warning}")
            continue
        text = path.read_text(encoding="utf-8")
        if suffix == ".xml":
            state.records.extend(parse_event_xml(text, source=path.stem))
        else:
            state.records.extend(load_csv(text))

    auth_events, skipped = normalize_auth_events(state.records)
    state.auth_events = auth_events
    state.skipped_auth_records = skipped
    if skipped:
        state.notes.append(
            f"{skipped} auth record(s) skipped during normalization "
            f"(missing TargetUserName)"
        )

    state.findings.extend(detect_bruteforce(auth_events, config.detector))
    if not state.findings:
        state.notes.append("no qualifying behaviour detected in evidence")

    for finding in state.findings:
        if config.summarize_findings:
            result = narrative_for_finding(finding, deps.gateway)
            state.finding_summaries.append(result.text)
            _absorb(state, result)
        else:
            state.finding_summaries.append(fallback_summary(finding))
    return STATUS_OK, None


def _stage_map_attack(state: ReviewState, deps: StageDeps):
    if not state.findings:
        return STATUS_OK, "no findings to map"
    for i, finding in enumerate(state.findings):
        mapping = map_finding(
            finding,
            deps.catalog,
            finding_ref=i,
            refine=deps.config.refine_subtechniques,
        )
        result = justify_mapping(mapping, finding, deps.gateway)
        mapping.rationale = result.text
        _absorb(state, result)
        state.mappings.append(mapping)
    return STATUS_OK, None


def _stage_retrieve_policies(state: ReviewState, deps: StageDeps):
    config = deps.config
    for path in config.org_policy_paths:
        state.policy_documents.append(
            ingest_policy_file(path, DOC_KIND_ORGANISATION)
        )
    for path in config.baseline_policy_paths:
        state.policy_documents.append(ingest_policy_file(path, DOC_KIND_BASELINE))

    if not state.mappings:
        return STATUS_OK, "no technique mapping; retrieval skipped"
    index = build_index(state.policy_documents)
    query = technique_query(state.mappings[0], deps.catalog)
    state.retrieval_query = query
    state.retrieval = retrieve(index, query, config.retrieval_k)
    return STATUS_OK, None


def _stage_validate_policies(state: ReviewState, deps: StageDeps):
    if not state.findings:
        return STATUS_SKIPPED, "no findings; incident-driven gap analysis skipped"

    kind_by_doc = {d.doc_id: d.kind for d in state.policy_documents}
    org_clauses = [
        h.clause
        for h in state.retrieval
        if kind_by_doc[h.clause.doc_id] == DOC_KIND_ORGANISATION
    ]
    baseline_clauses = [
        h.clause
        for h in state.retrieval
        if kind_by_doc[h.clause.doc_id] == DOC_KIND_BASELINE
    ]
    state.org_params = extract_control_parameters(org_clauses)
    state.baseline_params = extract_control_parameters(baseline_clauses)

    rules = load_default_rules()
    for params in (state.org_params, state.baseline_params):
        _, warnings = select_effective(params, rules)
        state.notes.extend(warnings)

    all_gaps: list[PolicyGap] = []
    for mapping in state.mappings:
        finding = state.findings[mapping.finding_ref]
        all_gaps.extend(
            compare_controls(
                state.org_params,
                state.baseline_params,
                mapping,
                finding.evidence,
                rules,
            )
        )
    gaps = dedupe_gaps(all_gaps)
    for gap in gaps:
        assign_confidence(gap, min_evidence=deps.config.detector.min_failures)
        rationale, remediation, result = draft_rationale(gap, deps.gateway)
        gap.rationale = rationale
        gap.remediation = remediation
        _absorb(state, result)
    state.gaps.extend(gaps)
    if not gaps:
        return STATUS_OK, "no gaps against baseline"
    return STATUS_OK, None


def _stage_generate_report(state: ReviewState, deps: StageDeps):
    fallback = reporting.deterministic_incident_summary(state)
    if state.findings:
        refs: list[str] = []
        for finding in state.findings:
            refs.extend(finding.evidence)
            if finding.success_record:
                refs.append(finding.success_record)
        clause_ids: list[str] = []
        for gap in state.gaps:
            for cid in gap.evidence_clauses:
                if cid not in clause_ids:
                    clause_ids.append(cid)
        result = deps.gateway.narrate(
            "incident_summary",
            {
                "findings_digest": "; ".join(
                    f"{f.failure_count} failed logons for '{f.account}'"
                    for f in state.findings
                ),
                "technique_digest": "; ".join(
                    f"{m.technique_id} {m.technique_name}" for m in state.mappings
                )
                or "none",
                "gap_digest": "; ".join(
                    f"{g.control} ({g.gap_kind}, severity {g.severity})"
                    for g in state.gaps
                )
                or "none identified",
                "event_refs": ", ".join(refs),
                "clause_refs": ", ".join(clause_ids) or "none",
            },
            record_refs=refs,
            clause_ids=clause_ids,
            fallback=fallback,
        )
        state.incident_summary = result.text
        _absorb(state, result)
    else:
        state.incident_summary = fallback

    state.report = reporting.build_report(state, generated_at=utc_now())
    return STATUS_OK, None


def ingest_policy_file(path: Path, kind: str) -> PolicyDocument:
    from .policy_index import ingest_document

    return ingest_document(path.stem, kind, path.read_text(encoding="utf-8"))


_STAGE_FUNCS = {
    "ProcessEvidence": _stage_process_evidence,
    "MapAttack": _stage_map_attack,
    "RetrievePolicies": _stage_retrieve_policies,
    "ValidatePolicies": _stage_validate_policies,
    "GenerateReport": _stage_generate_report,
}


def check_stage_order(stage_log: list[StageRecord], stage: str) -> None:
    """Raise unless ``stage`` is exactly the next pending stage and no
    predecessor failed."""
    if stage not in STAGES:
        raise StageOrderViolationError(f"unknown stage {stage!r}")
    for record in stage_log:
        if record.status == STATUS_FAILED:
            raise StageOrderViolationError(
                f"cannot run {stage}: stage {record.stage} previously failed"
            )
    done = [r.stage for r in stage_log]
    expected = len(done)
    actual = STAGES.index(stage)
    if done != list(STAGES[:expected]) or actual != expected:
        raise StageOrderViolationError(
            f"stage {stage} invoked out of order; completed so far: {done or '[]'}"
        )


def run_stage(state: ReviewState, stage: str, deps: StageDeps) -> ReviewState:
    """Execute one stage on a copy of the state and return the extension.

    Raises StageOrderViolation when invoked out of order and StageFailure
    (carrying the partial state) when the stage body errors.
    """
    check_stage_order(state.stage_log, stage)
    new_state = state.copy()
    record = StageRecord(stage=stage, started=utc_now())
    try:
        result = _STAGE_FUNCS[stage](new_state, deps)
    except (ReviewError, OSError, ValueError) as exc:
        record.status = STATUS_FAILED
        record.note = f"{type(exc).__name__}: {exc}"
        record.finished = utc_now()
        new_state.stage_log.append(record)
        raise StageFailureError(stage, exc, partial_state=new_state) from exc
    record.status, record.note = result
    record.finished = utc_now()
    new_state.stage_log.append(record)
    return new_state


def save_checkpoint(state: ReviewState, output_dir: Path, stage: str) -> Path:
    state_dir = output_dir / "state"
    state_dir.mkdir(parents=True, exist_ok=True)
    path = state_dir / f"{stage}.json"
    path.write_text(canon_dumps(state.to_dict()) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: Path) -> ReviewState:
    import json

    return ReviewState.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def run_review(config: ReviewConfig, transport=None) -> ReviewState:
    """Run the whole pipeline, checkpointing each stage, and write the
    report files into the configured output directory."""
    config.validate()
    deps = build_deps(config, transport=transport)
    state = ReviewState(
        run_id=f"run-{config.digest[:12]}", config_digest=config.digest
    )

    for stage in STAGES:
        try:
            state = run_stage(state, stage, deps)
        except StageFailureError as exc:
            save_checkpoint(exc.partial_state, config.output_dir, stage)
            raise
        save_checkpoint(state, config.output_dir, stage)
        if stage == "RetrievePolicies" and state.policy_documents:
            index = build_index(state.policy_documents)
            index_path = config.output_dir / "state" / "policy_index.json"
            index_path.write_text(index.to_json(), encoding="utf-8")

    write_report_files(state, config.output_dir)
    return state


def write_report_files(state: ReviewState, output_dir: Path) -> tuple[Path, Path]:
    output_dir.mkdir(parents=True, exist_ok=True)
    json_path = output_dir / "report.json"
    md_path = output_dir / "report.md"
    json_path.write_text(reporting.render_json(state), encoding="utf-8")
    md_path.write_text(reporting.render_markdown(state), encoding="utf-8")
    return json_path, md_path
