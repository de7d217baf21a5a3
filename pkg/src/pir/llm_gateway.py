"""Provider-agnostic generative-model gateway with record/replay transcripts.

Every call renders a fixed template, hashes (template_id, rendered prompt,
decoding params, model id) into a transcript id, and either performs one
HTTP chat-completion request (live/record) or reads the committed cache file
for that id (replay). Replay never touches the network, which is what makes
review runs reproducible offline.

Model output never reaches a report directly: narrate() validates citation
markers ([EVT:<record_ref>], [POL:<clause_id>]) against the caller's
resolution scope and substitutes a deterministic fallback when grounding
fails, flagging the transcript degraded.

Environment: PIR_LLM_ENDPOINT, PIR_LLM_API_KEY, PIR_LLM_MODEL.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .canon import canon_dumps, sha256_hex
from .errors import (
    ConfigInvalidError,
    GatewayDisabledError,
    GatewayUnavailableError,
    MissingPlaceholderError,
    ProviderError,
    ReplayMissError,
)

logger = logging.getLogger(__name__)

MODE_LIVE = "live"
MODE_RECORD = "record"
MODE_REPLAY = "replay"
MODE_DISABLED = "disabled"
GATEWAY_MODES = (MODE_LIVE, MODE_RECORD, MODE_REPLAY, MODE_DISABLED)

ENV_ENDPOINT = "PIR_LLM_ENDPOINT"
ENV_API_KEY = "PIR_LLM_API_KEY"
ENV_MODEL = "PIR_LLM_MODEL"

RETRY_BACKOFF_SECONDS = (1.0, 4.0)

_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")
EVT_MARKER = re.compile(r"\[EVT:([^\]\s]+)\]")
POL_MARKER = re.compile(r"\[POL:([^\]\s]+)\]")


@dataclass(frozen=True)
class GenerationParams:
    """Decoding parameters, fixed for a whole run; temperature 0 maximizes
    repeatability."""

    model_id: str = "gpt-4o"
    temperature: float = 0.0
    max_tokens: int = 1024
    top_p: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError(f"temperature must be in [0,1], got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0,1], got {self.top_p}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "top_p": self.top_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationParams":
        return cls(
            model_id=d.get("model_id", "gpt-4o"),
            temperature=float(d.get("temperature", 0.0)),
            max_tokens=int(d.get("max_tokens", 1024)),
            top_p=float(d.get("top_p", 1.0)),
        )


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    stage: str
    body: str
    required_placeholders: tuple[str, ...]


def render(template: PromptTemplate, bindings: dict[str, str]) -> str:
    """Deterministic placeholder substitution; nothing else."""
    missing = [p for p in template.required_placeholders if p not in bindings]
    if missing:
        raise MissingPlaceholderError(
            f"template {template.template_id} missing bindings: {', '.join(missing)}"
        )
    rendered = _PLACEHOLDER.sub(
        lambda m: bindings.get(m.group(1), m.group(0)), template.body
    )
    leftover = _PLACEHOLDER.search(rendered)
    if leftover:
        raise MissingPlaceholderError(
            f"template {template.template_id} placeholder "
            f"{leftover.group(1)!r} left unbound"
        )
    return rendered


# Spelled out in words rather than shown literally: a bracketed example such
# as "[EVT:x]" would itself parse as a citation marker wherever this prompt
# text is archived, and "x" resolves to nothing.
_CITATION_RULES = (
    "Cite every factual claim inline with a citation marker: the text EVT: "
    "followed by a record ref, or POL: followed by a clause id, enclosed in "
    "square brackets with no spaces. Use only the refs listed below. Do not "
    "make claims you cannot cite, and do not invent refs."
)

TEMPLATES: dict[str, PromptTemplate] = {
    t.template_id: t
    for t in (
        PromptTemplate(
            template_id="finding_summary",
            stage="ProcessEvidence",
            body=(
                "You are assisting a post-incident security review. Summarise "
                "the following authentication behaviour in two to four "
                f"sentences for an incident report. {_CITATION_RULES}\n\n"
                "Account: {{account}}\n"
                "Failed logon count: {{failure_count}}\n"
                "Window (UTC): {{window_start}} to {{window_end}}\n"
                "Subsequent successful logon: {{success_line}}\n"
                "Available record refs: {{evidence_refs}}"
            ),
            required_placeholders=(
                "account",
                "failure_count",
                "window_start",
                "window_end",
                "success_line",
                "evidence_refs",
            ),
        ),
        PromptTemplate(
            template_id="mapping_justification",
            stage="MapAttack",
            body=(
                "You are assisting a post-incident security review. Explain in "
                "two or three sentences why the observed behaviour maps to the "
                f"MITRE ATT&CK technique below. {_CITATION_RULES}\n\n"
                "Technique: {{technique_id}} {{technique_name}} "
                "(tactic: {{tactic}})\n"
                "Account: {{account}}\n"
                "Failed logon count: {{failure_count}}\n"
                "Available record refs: {{evidence_refs}}"
            ),
            required_placeholders=(
                "technique_id",
                "technique_name",
                "tactic",
                "account",
                "failure_count",
                "evidence_refs",
            ),
        ),
        PromptTemplate(
            template_id="gap_rationale",
            stage="ValidatePolicies",
            body=(
                "You are assisting a post-incident security review. Write the "
                "rationale and remediation for the policy gap below. Respond "
                "in exactly two paragraphs, the first starting with "
                "'RATIONALE:' and the second starting with 'REMEDIATION:'. "
                "The remediation must reference the baseline requirement. "
                f"{_CITATION_RULES}\n\n"
                "Control: {{control}}\n"
                "Gap kind: {{gap_kind}}\n"
                "Organisation position: {{org_summary}}\n"
                "Baseline requirement: {{baseline_summary}}\n"
                "Available record refs: {{event_refs}}\n"
                "Available clause refs: {{clause_refs}}"
            ),
            required_placeholders=(
                "control",
                "gap_kind",
                "org_summary",
                "baseline_summary",
                "event_refs",
                "clause_refs",
            ),
        ),
        PromptTemplate(
            template_id="incident_summary",
            stage="GenerateReport",
            body=(
                "You are assisting a post-incident security review. Write a "
                "three to five sentence executive summary of the incident and "
                f"its policy implications. {_CITATION_RULES}\n\n"
                "Behaviour findings: {{findings_digest}}\n"
                "Technique attributions: {{technique_digest}}\n"
                "Policy gaps: {{gap_digest}}\n"
                "Available record refs: {{event_refs}}\n"
                "Available clause refs: {{clause_refs}}"
            ),
            required_placeholders=(
                "findings_digest",
                "technique_digest",
                "gap_digest",
                "event_refs",
                "clause_refs",
            ),
        ),
    )
}


@dataclass
class GroundingReport:
    markers_found: list[str]
    resolved: list[str]
    unresolved: list[str]
    passed: bool

    def to_dict(self) -> dict:
        return {
            "markers_found": list(self.markers_found),
            "resolved": list(self.resolved),
            "unresolved": list(self.unresolved),
            "passed": self.passed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundingReport":
        return cls(
            markers_found=list(d["markers_found"]),
            resolved=list(d["resolved"]),
            unresolved=list(d["unresolved"]),
            passed=bool(d["passed"]),
        )


def validate_grounding(
    response: str,
    record_refs,
    clause_ids,
    *,
    require_markers: bool = True,
) -> GroundingReport:
    """Resolve every [EVT:]/[POL:] marker in the response against the given
    scope; evidence-bearing text with zero markers fails."""
    record_refs = set(record_refs)
    clause_ids = set(clause_ids)
    markers: dict[str, bool] = {}
    for m in EVT_MARKER.finditer(response):
        markers.setdefault(m.group(0), m.group(1) in record_refs)
    for m in POL_MARKER.finditer(response):
        markers.setdefault(m.group(0), m.group(1) in clause_ids)
    resolved = [mk for mk, ok in markers.items() if ok]
    unresolved = [mk for mk, ok in markers.items() if not ok]
    passed = not unresolved and (bool(markers) or not require_markers)
    return GroundingReport(
        markers_found=list(markers),
        resolved=resolved,
        unresolved=unresolved,
        passed=passed,
    )


@dataclass
class Transcript:
    transcript_id: str
    stage: str
    template_id: str
    rendered_prompt: str
    response: str
    mode: str  # "Live" or "Replay"
    grounding: GroundingReport | None = None
    degraded: bool = False
    latency_ms: int = 0

    def to_dict(self) -> dict:
        return {
            "transcript_id": self.transcript_id,
            "stage": self.stage,
            "template_id": self.template_id,
            "rendered_prompt": self.rendered_prompt,
            "response": self.response,
            "mode": self.mode,
            "grounding": self.grounding.to_dict() if self.grounding else None,
            "degraded": self.degraded,
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transcript":
        return cls(
            transcript_id=d["transcript_id"],
            stage=d["stage"],
            template_id=d["template_id"],
            rendered_prompt=d["rendered_prompt"],
            response=d["response"],
            mode=d["mode"],
            grounding=(
                GroundingReport.from_dict(d["grounding"]) if d["grounding"] else None
            ),
            degraded=bool(d["degraded"]),
            latency_ms=int(d["latency_ms"]),
        )


@dataclass
class NarrativeResult:
    """Outcome of one grounded narration request."""

    text: str
    degraded: bool
    transcript: Transcript | None
    note: str | None = None


def transcript_id_for(
    template_id: str, rendered_prompt: str, params: GenerationParams
) -> str:
    return sha256_hex(
        canon_dumps(
            {
                "template_id": template_id,
                "rendered_prompt": rendered_prompt,
                "params": {
                    "temperature": params.temperature,
                    "max_tokens": params.max_tokens,
                    "top_p": params.top_p,
                },
                "model_id": params.model_id,
            }
        )
    )


class TransientTransportError(Exception):
    """Network-level failure worth retrying (connect/timeout/5xx)."""


def http_transport(
    endpoint: str, api_key: str | None, timeout_seconds: float
) -> Callable[[dict], str]:
    """Default JSON-over-HTTP chat-completion transport.

    Request body: {"model", "messages": [{"role": "user", "content": prompt}],
    "temperature", "top_p", "max_tokens"}; response text is read from
    choices[0].message.content.
    """

    def call(request_body: dict) -> str:
        payload = json.dumps(request_body).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        req = urllib.request.Request(
            endpoint, data=payload, headers=headers, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=timeout_seconds) as resp:
                body = resp.read().decode("utf-8")
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", "replace")[:500]
            if exc.code >= 500:
                raise TransientTransportError(
                    f"provider returned {exc.code}: {detail}"
                ) from exc
            raise ProviderError(exc.code, detail) from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise TransientTransportError(str(exc)) from exc
        try:
            parsed = json.loads(body)
            return parsed["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(200, f"unparseable provider response: {exc}") from exc

    return call


@dataclass
class GatewaySettings:
    mode: str = MODE_REPLAY
    params: GenerationParams = field(default_factory=GenerationParams)
    cache_dir: Path = Path("llm_cache")
    endpoint: str | None = None
    api_key: str | None = None
    timeout_seconds: float = 30.0
    max_retries: int = 2
    max_concurrency: int = 2

    def __post_init__(self) -> None:
        if self.mode not in GATEWAY_MODES:
            raise ConfigInvalidError(
                f"gateway mode must be one of {GATEWAY_MODES}, got {self.mode!r}"
            )
        self.cache_dir = Path(self.cache_dir)

    @classmethod
    def from_env(cls, mode: str, cache_dir: Path, params: GenerationParams
                 ) -> "GatewaySettings":
        return cls(
            mode=mode,
            params=params,
            cache_dir=cache_dir,
            endpoint=os.environ.get(ENV_ENDPOINT),
            api_key=os.environ.get(ENV_API_KEY),
        )


class Gateway:
    """One gateway per review run; shareable across threads.

    A non-default ``transport`` callable (request body dict -> response text)
    replaces the HTTP layer, which is how tests and the fixture recorder stay
    offline.
    """

    def __init__(
        self,
        settings: GatewaySettings,
        transport: Callable[[dict], str] | None = None,
    ):
        self.settings = settings
        self._transport = transport
        self._sem = threading.Semaphore(settings.max_concurrency)

    # -- cache ------------------------------------------------------------

    def _cache_path(self, transcript_id: str) -> Path:
        return self.settings.cache_dir / f"{transcript_id}.json"

    def _write_cache(self, entry: dict) -> None:
        path = self._cache_path(entry["transcript_id"])
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp-{os.getpid()}")
        tmp.write_text(
            json.dumps(entry, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
        os.replace(tmp, path)

    def _read_cache(self, transcript_id: str) -> dict:
        path = self._cache_path(transcript_id)
        if not path.is_file():
            raise ReplayMissError(transcript_id, str(self.settings.cache_dir))
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
            entry["response"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ReplayMissError(
                transcript_id, f"{self.settings.cache_dir} (corrupt entry: {exc})"
            ) from exc
        return entry

    # -- live call with retries -------------------------------------------

    def _live_response(self, rendered_prompt: str) -> str:
        transport = self._transport
        if transport is None:
            if not self.settings.endpoint:
                raise GatewayUnavailableError(
                    f"no endpoint configured; set {ENV_ENDPOINT}"
                )
            transport = http_transport(
                self.settings.endpoint,
                self.settings.api_key,
                self.settings.timeout_seconds,
            )
        p = self.settings.params
        request_body = {
            "model": p.model_id,
            "messages": [{"role": "user", "content": rendered_prompt}],
            "temperature": p.temperature,
            "top_p": p.top_p,
            "max_tokens": p.max_tokens,
        }
        last_error: Exception | None = None
        for attempt in range(self.settings.max_retries + 1):
            if attempt > 0:
                delay = RETRY_BACKOFF_SECONDS[
                    min(attempt - 1, len(RETRY_BACKOFF_SECONDS) - 1)
                ]
                logger.warning(
                    "gateway retry %d after %.0f s: %s", attempt, delay, last_error
                )
                time.sleep(delay)
            try:
                with self._sem:
                    return transport(request_body)
            except TransientTransportError as exc:
                last_error = exc
        raise GatewayUnavailableError(
            f"gateway unavailable after {self.settings.max_retries} retries: "
            f"{last_error}"
        )

    # -- public API ---------------------------------------------------------

    def complete(self, template_id: str, bindings: dict[str, str]) -> Transcript:
        """One gateway call; grounding is the caller's concern (see narrate)."""
        if self.settings.mode == MODE_DISABLED:
            raise GatewayDisabledError("gateway is disabled by configuration")
        template = TEMPLATES.get(template_id)
        if template is None:
            raise ConfigInvalidError(f"unknown prompt template {template_id!r}")
        rendered = render(template, bindings)
        tid = transcript_id_for(template_id, rendered, self.settings.params)

        if self.settings.mode == MODE_REPLAY:
            entry = self._read_cache(tid)
            return Transcript(
                transcript_id=tid,
                stage=template.stage,
                template_id=template_id,
                rendered_prompt=rendered,
                response=entry["response"],
                mode="Replay",
                latency_ms=0,
            )

        start = time.monotonic()
        response = self._live_response(rendered)
        latency_ms = int((time.monotonic() - start) * 1000)
        if self.settings.mode == MODE_RECORD:
            self._write_cache(
                {
                    "transcript_id": tid,
                    "template_id": template_id,
                    "stage": template.stage,
                    "model_id": self.settings.params.model_id,
                    "params": {
                        "temperature": self.settings.params.temperature,
                        "max_tokens": self.settings.params.max_tokens,
                        "top_p": self.settings.params.top_p,
                    },
                    "rendered_prompt": rendered,
                    "response": response,
                }
            )
        return Transcript(
            transcript_id=tid,
            stage=template.stage,
            template_id=template_id,
            rendered_prompt=rendered,
            response=response,
            mode="Live",
            latency_ms=latency_ms,
        )

    def narrate(
        self,
        template_id: str,
        bindings: dict[str, str],
        *,
        record_refs,
        clause_ids,
        fallback: str,
        require_markers: bool = True,
    ) -> NarrativeResult:
        """Grounded narration: model text is used only when every citation
        resolves; otherwise the deterministic fallback takes its place."""
        if self.settings.mode == MODE_DISABLED:
            return NarrativeResult(
                text=fallback,
                degraded=True,
                transcript=None,
                note=f"gateway disabled; deterministic {template_id} text used",
            )
        transcript = self.complete(template_id, bindings)
        report = validate_grounding(
            transcript.response,
            record_refs,
            clause_ids,
            require_markers=require_markers,
        )
        transcript.grounding = report
        if report.passed:
            return NarrativeResult(
                text=transcript.response, degraded=False, transcript=transcript
            )
        transcript.degraded = True
        detail = (
            f"unresolved markers: {', '.join(report.unresolved)}"
            if report.unresolved
            else "no citation markers present"
        )
        return NarrativeResult(
            text=fallback,
            degraded=True,
            transcript=transcript,
            note=f"grounding failed for {template_id} ({detail}); "
            f"deterministic text used",
        )
