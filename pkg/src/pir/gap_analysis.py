"""Control extraction from policy clauses and incident-driven gap analysis.

A fixed pattern grammar turns clause text into comparable control parameters;
the organisation's values are compared against the baseline's under a
direction-of-safety table, yielding severity- and confidence-scored gaps.
Direction, relevance, and severity tables ship as versioned JSON so they can
be tuned without code changes.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from typing import TYPE_CHECKING

from .errors import ConfigInvalidError, NoBaselineError
from .policy_index import PolicyClause

if TYPE_CHECKING:
    from .attack_catalog import TechniqueMapping
    from .llm_gateway import Gateway, NarrativeResult

logger = logging.getLogger(__name__)

CONTROLS = (
    "LockoutThreshold",
    "LockoutDurationMinutes",
    "PasswordMaxAgeDays",
    "PasswordMinLength",
    "MfaRequired",
    "MonitoringAlerting",
)

EXTRACTION_DETERMINISTIC = "Deterministic"
EXTRACTION_LLM_ASSISTED = "LlmAssisted"

GAP_INSUFFICIENT = "Insufficient"
GAP_MISSING = "Missing"

# Incident-framing phrase per control, used in deterministic rationales.
CONTROL_PHRASES = {
    "LockoutThreshold": "overly permissive account lockout threshold",
    "LockoutDurationMinutes": "insufficient account lockout duration",
    "PasswordMaxAgeDays": "infrequent password rotation requirement",
    "PasswordMinLength": "inadequate minimum password length",
    "MfaRequired": "absent or unenforced multi-factor authentication requirement",
    "MonitoringAlerting": "insufficient authentication monitoring and alerting",
}

# Extraction grammar. Numeric controls list (pattern, group) alternatives
# tried in order; first match in a clause wins for that control.
_NUMERIC_PATTERNS: dict[str, tuple[str, list[re.Pattern[str]]]] = {
    "LockoutThreshold": (
        "attempts",
        [
            re.compile(r"lockout\s+threshold\D*?(\d+)", re.I),
            re.compile(
                r"lock(?:ed|out|s)?\b[^.]*?\bafter\s+(\d+)\s+"
                r"(?:failed|invalid)\s+(?:logon\s+|login\s+|sign[- ]?in\s+)?attempts",
                re.I,
            ),
        ],
    ),
    "LockoutDurationMinutes": (
        "minutes",
        [
            re.compile(r"lock(?:out)?\s+duration\D*?(\d+)\s*minutes?", re.I),
            re.compile(r"locked\s+(?:out\s+)?for\s+(\d+)\s+minutes?", re.I),
        ],
    ),
    "PasswordMaxAgeDays": (
        "days",
        [
            re.compile(
                r"(?:password|rotat|chang)\w*[^.]*?\bevery\s+(\d+)\s+days", re.I
            ),
            re.compile(r"(\d+)[- ]day\s+rotation", re.I),
        ],
    ),
    "PasswordMinLength": (
        "characters",
        [
            re.compile(
                r"(?:password|passphrase)\w*[^.]*?\bat\s+least\s+(\d+)\s+characters",
                re.I,
            ),
            re.compile(r"minimum\s+(?:password\s+)?length\D*?(\d+)", re.I),
        ],
    ),
}

# Boolean controls extract True when a mention co-occurs with an obligation.
_BOOLEAN_PATTERNS: dict[str, tuple[re.Pattern[str], re.Pattern[str]]] = {
    "MfaRequired": (
        re.compile(r"\bmulti[- ]?factor\b|\bmfa\b|\btwo[- ]?factor\b", re.I),
        re.compile(r"\b(?:must|shall|required?|requires|mandatory|enforced)\b", re.I),
    ),
    "MonitoringAlerting": (
        re.compile(r"\bmonitor\w*|\bsiem\b|\balert\w*|\baudit\s+log\w*", re.I),
        re.compile(
            r"\b(?:must|shall|required?|reviewed|raised|forwarded|enabled"
            r"|generated?)\b",
            re.I,
        ),
    ),
}


@dataclass
class ControlParameter:
    control: str
    value: int | float | bool
    unit: str
    clause_ref: str
    extraction: str

    def __post_init__(self) -> None:
        if self.control not in CONTROLS:
            raise ValueError(f"unknown control {self.control!r}")
        if isinstance(self.value, bool):
            return
        if not self.unit:
            raise ValueError(f"numeric control {self.control} requires a unit")

    def to_dict(self) -> dict:
        return {
            "control": self.control,
            "value": self.value,
            "unit": self.unit,
            "clause_ref": self.clause_ref,
            "extraction": self.extraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ControlParameter":
        return cls(
            control=d["control"],
            value=d["value"],
            unit=d["unit"],
            clause_ref=d["clause_ref"],
            extraction=d["extraction"],
        )


@dataclass
class PolicyGap:
    control: str
    technique_id: str
    org_value: ControlParameter | None
    baseline_value: ControlParameter | None
    gap_kind: str
    severity: str
    confidence: str | None
    rationale: str
    remediation: str
    evidence_events: list[str]
    evidence_clauses: list[str]

    def to_dict(self) -> dict:
        return {
            "control": self.control,
            "technique_id": self.technique_id,
            "org_value": self.org_value.to_dict() if self.org_value else None,
            "baseline_value": (
                self.baseline_value.to_dict() if self.baseline_value else None
            ),
            "gap_kind": self.gap_kind,
            "severity": self.severity,
            "confidence": self.confidence,
            "rationale": self.rationale,
            "remediation": self.remediation,
            "evidence_events": list(self.evidence_events),
            "evidence_clauses": list(self.evidence_clauses),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyGap":
        return cls(
            control=d["control"],
            technique_id=d["technique_id"],
            org_value=(
                ControlParameter.from_dict(d["org_value"]) if d["org_value"] else None
            ),
            baseline_value=(
                ControlParameter.from_dict(d["baseline_value"])
                if d["baseline_value"]
                else None
            ),
            gap_kind=d["gap_kind"],
            severity=d["severity"],
            confidence=d.get("confidence"),
            rationale=d["rationale"],
            remediation=d["remediation"],
            evidence_events=list(d["evidence_events"]),
            evidence_clauses=list(d["evidence_clauses"]),
        )


@dataclass(frozen=True)
class ComparisonRules:
    relevance: dict[str, tuple[str, ...]]
    direction: dict[str, str]
    severity: dict[str, dict]

    def relevant_controls(self, technique_id: str) -> tuple[str, ...]:
        if technique_id in self.relevance:
            return self.relevance[technique_id]
        parent = technique_id.split(".", 1)[0]
        return self.relevance.get(parent, ())


def load_rules(text: str) -> ComparisonRules:
    d = json.loads(text)
    if d.get("schema_version") != 1:
        raise ConfigInvalidError(
            f"unsupported comparison rules schema_version {d.get('schema_version')!r}"
        )
    direction = d["direction"]
    for control in CONTROLS:
        if control not in direction:
            raise ConfigInvalidError(f"direction table lacks control {control}")
        if direction[control] not in (
            "lower_is_stricter",
            "higher_is_stricter",
            "true_is_stricter",
        ):
            raise ConfigInvalidError(
                f"unknown direction {direction[control]!r} for {control}"
            )
    return ComparisonRules(
        relevance={k: tuple(v) for k, v in d["relevance"].items()},
        direction=dict(direction),
        severity=d["severity"],
    )


def load_default_rules() -> ComparisonRules:
    text = (
        resources.files("pir").joinpath("data/comparison_rules.json").read_text("utf-8")
    )
    return load_rules(text)


def extract_control_parameters(
    clauses: list[PolicyClause],
) -> list[ControlParameter]:
    """Run the pattern grammar over clauses; first match per (control, clause)
    wins, all matches across clauses are returned, non-matching clauses yield
    nothing."""
    params: list[ControlParameter] = []
    for clause in clauses:
        for control, (unit, patterns) in _NUMERIC_PATTERNS.items():
            for pattern in patterns:
                m = pattern.search(clause.text)
                if m:
                    params.append(
                        ControlParameter(
                            control=control,
                            value=int(m.group(1)),
                            unit=unit,
                            clause_ref=clause.clause_id,
                            extraction=EXTRACTION_DETERMINISTIC,
                        )
                    )
                    break
        for control, (mention, obligation) in _BOOLEAN_PATTERNS.items():
            if mention.search(clause.text) and obligation.search(clause.text):
                params.append(
                    ControlParameter(
                        control=control,
                        value=True,
                        unit="",
                        clause_ref=clause.clause_id,
                        extraction=EXTRACTION_DETERMINISTIC,
                    )
                )
    return params


def _stricter(a: ControlParameter, b: ControlParameter, direction: str) -> ControlParameter:
    if direction == "lower_is_stricter":
        return a if a.value <= b.value else b
    if direction == "higher_is_stricter":
        return a if a.value >= b.value else b
    return a if bool(a.value) >= bool(b.value) else b


def select_effective(
    params: list[ControlParameter], rules: ComparisonRules
) -> tuple[dict[str, ControlParameter], list[str]]:
    """Collapse multiple values per control to the strictest one.

    Conflicting values produce a consistency warning (conservative audit
    posture: assume the strictest stated control governs).
    """
    effective: dict[str, ControlParameter] = {}
    warnings: list[str] = []
    for param in params:
        current = effective.get(param.control)
        if current is None:
            effective[param.control] = param
            continue
        if current.value != param.value:
            winner = _stricter(current, param, rules.direction[param.control])
            warnings.append(
                f"conflicting values for {param.control}: {current.value} "
                f"({current.clause_ref}) vs {param.value} ({param.clause_ref}); "
                f"using strictest {winner.value}"
            )
            effective[param.control] = winner
    return effective, warnings


def is_weaker(org_value, baseline_value, direction: str) -> bool:
    """Direction-of-safety predicate: is org strictly weaker than baseline?"""
    if direction == "lower_is_stricter":
        return org_value > baseline_value
    if direction == "higher_is_stricter":
        return org_value < baseline_value
    if direction == "true_is_stricter":
        return (not bool(org_value)) and bool(baseline_value)
    raise ConfigInvalidError(f"unknown direction {direction!r}")


def _severity(
    rules: ComparisonRules, gap_kind: str, control: str, org_value, baseline_value
) -> str:
    entry = rules.severity[gap_kind][control]
    if isinstance(entry, str):
        return entry
    if entry.get("kind") == "ratio":
        if org_value >= entry["ratio"] * baseline_value:
            return entry["at_or_above"]
        return entry["below"]
    raise ConfigInvalidError(f"unknown severity rule {entry!r} for {control}")


def compare_controls(
    org: list[ControlParameter],
    baseline: list[ControlParameter],
    mapping: "TechniqueMapping",
    evidence_events: list[str],
    rules: ComparisonRules | None = None,
) -> list[PolicyGap]:
    """Compare org controls against baseline for the mapped technique.

    Only controls relevant to the technique are compared. org weaker than
    baseline yields Insufficient; org absent while baseline present yields
    Missing; org-only controls are not gaps. Gaps carry empty rationale and
    confidence; draft_rationale and assign_confidence fill them in.
    """
    if not evidence_events:
        raise ValueError("gap analysis is incident-driven; evidence_events is empty")
    if not baseline:
        raise NoBaselineError("no baseline control parameters to compare against")
    if rules is None:
        rules = load_default_rules()

    effective_org, org_warn = select_effective(org, rules)
    effective_base, base_warn = select_effective(baseline, rules)
    for warning in org_warn + base_warn:
        logger.warning("%s", warning)

    relevant = rules.relevant_controls(mapping.technique_id)
    if not relevant:
        logger.warning(
            "no relevance entry for technique %s; no controls compared",
            mapping.technique_id,
        )

    gaps: list[PolicyGap] = []
    for control in relevant:
        base_param = effective_base.get(control)
        if base_param is None:
            continue
        org_param = effective_org.get(control)
        if org_param is None:
            gap_kind = GAP_MISSING
        elif is_weaker(org_param.value, base_param.value, rules.direction[control]):
            gap_kind = GAP_INSUFFICIENT
        else:
            continue
        clauses = []
        if org_param is not None:
            clauses.append(org_param.clause_ref)
        clauses.append(base_param.clause_ref)
        gaps.append(
            PolicyGap(
                control=control,
                technique_id=mapping.technique_id,
                org_value=org_param,
                baseline_value=base_param,
                gap_kind=gap_kind,
                severity=_severity(
                    rules,
                    gap_kind,
                    control,
                    org_param.value if org_param else None,
                    base_param.value,
                ),
                confidence=None,
                rationale="",
                remediation="",
                evidence_events=list(evidence_events),
                evidence_clauses=clauses,
            )
        )
    gaps.sort(key=lambda g: (g.control, g.technique_id))
    return gaps


def dedupe_gaps(gaps: list[PolicyGap]) -> list[PolicyGap]:
    """Merge gaps that share (control, technique_id), unioning evidence."""
    merged: dict[tuple[str, str], PolicyGap] = {}
    for gap in gaps:
        key = (gap.control, gap.technique_id)
        kept = merged.get(key)
        if kept is None:
            merged[key] = gap
            continue
        for ref in gap.evidence_events:
            if ref not in kept.evidence_events:
                kept.evidence_events.append(ref)
        for cid in gap.evidence_clauses:
            if cid not in kept.evidence_clauses:
                kept.evidence_clauses.append(cid)
    out = list(merged.values())
    out.sort(key=lambda g: (g.control, g.technique_id))
    return out


def assign_confidence(gap: PolicyGap, min_evidence: int = 5) -> PolicyGap:
    """Total confidence rule.

    Missing gaps rest on baseline text alone, so confidence is Low. High
    needs both sides deterministically extracted and at least ``min_evidence``
    incident records (the detector threshold); anything else is Medium.
    """
    if gap.gap_kind == GAP_MISSING:
        gap.confidence = "Low"
        return gap
    both_deterministic = (
        gap.org_value is not None
        and gap.baseline_value is not None
        and gap.org_value.extraction == EXTRACTION_DETERMINISTIC
        and gap.baseline_value.extraction == EXTRACTION_DETERMINISTIC
    )
    if both_deterministic and len(gap.evidence_events) >= min_evidence:
        gap.confidence = "High"
    else:
        gap.confidence = "Medium"
    return gap


def _fmt_value(param: ControlParameter | None) -> str:
    if param is None:
        return "absent"
    if isinstance(param.value, bool):
        return "required" if param.value else "not required"
    return f"{param.value} {param.unit}"


def deterministic_rationale(gap: PolicyGap) -> tuple[str, str]:
    """Template rationale/remediation used when no grounded narrative exists."""
    phrase = CONTROL_PHRASES[gap.control]
    first, last = gap.evidence_events[0], gap.evidence_events[-1]
    base = gap.baseline_value
    base_text = _fmt_value(base)
    base_ref = base.clause_ref if base else ""
    if gap.gap_kind == GAP_MISSING:
        rationale = (
            f"No organisational control for {gap.control} was found among the "
            f"retrieved clauses, while the baseline requires {base_text} "
            f"([POL:{base_ref}]): an {phrase}. The incident's "
            f"{len(gap.evidence_events)} failed logon attempts "
            f"([EVT:{first}]..[EVT:{last}]) underline the exposure."
        )
        remediation = (
            f"Adopt the baseline requirement for {gap.control} of {base_text} "
            f"(see [POL:{base_ref}])."
        )
        return rationale, remediation
    org = gap.org_value
    rationale = (
        f"The organisation sets {gap.control} to {_fmt_value(org)} "
        f"([POL:{org.clause_ref}]) while the baseline requires {base_text} "
        f"([POL:{base_ref}]): an {phrase}. The incident's "
        f"{len(gap.evidence_events)} failed logon attempts "
        f"([EVT:{first}]..[EVT:{last}]) proceeded without the control "
        f"intervening."
    )
    remediation = (
        f"Align {gap.control} with the baseline requirement of {base_text} "
        f"(see [POL:{base_ref}])."
    )
    return rationale, remediation


_RATIONALE_SPLIT = re.compile(
    r"RATIONALE:\s*(?P<rationale>.+?)\s*REMEDIATION:\s*(?P<remediation>.+)\s*$",
    re.S,
)


def draft_rationale(
    gap: PolicyGap, gateway: "Gateway"
) -> tuple[str, str, "NarrativeResult"]:
    """Grounded rationale and remediation for one gap.

    The model must answer in RATIONALE/REMEDIATION paragraphs; a response
    that fails grounding or the format check degrades to the deterministic
    template pair.
    """
    det_rationale, det_remediation = deterministic_rationale(gap)
    fallback = f"RATIONALE: {det_rationale}\n\nREMEDIATION: {det_remediation}"
    result = gateway.narrate(
        "gap_rationale",
        {
            "control": gap.control,
            "gap_kind": gap.gap_kind,
            "org_summary": _fmt_value(gap.org_value),
            "baseline_summary": _fmt_value(gap.baseline_value),
            "event_refs": ", ".join(gap.evidence_events),
            "clause_refs": ", ".join(gap.evidence_clauses),
        },
        record_refs=gap.evidence_events,
        clause_ids=gap.evidence_clauses,
        fallback=fallback,
    )
    m = _RATIONALE_SPLIT.search(result.text)
    if m is None:
        result.degraded = True
        result.note = (
            f"gap narrative for {gap.control} lacked RATIONALE/REMEDIATION "
            f"structure; deterministic text used"
        )
        return det_rationale, det_remediation, result
    return m.group("rationale"), m.group("remediation"), result
