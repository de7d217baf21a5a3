#!/usr/bin/env python3
"""Rebuild the committed replay caches under fixtures/.

Runs the demo review and the no-gap variant in record mode against a
scripted transport (no network), refreshing fixtures/llm_cache/. Then
derives fixtures/llm_cache_bad_citation/ from the recorded gap narrative by
swapping one clause citation for a fabricated one, which is the grounding-
failure case the degradation tests replay.

Rerun after changing prompt templates, generation params, or any fixture
input that feeds a prompt; transcript ids hash over all of those.
"""

from __future__ import annotations

import json
import re
import shutil
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from pir.config import ReviewConfig  # noqa: E402
from pir.orchestrator import run_review  # noqa: E402

FIXTURES = ROOT / "fixtures"
CACHE = FIXTURES / "llm_cache"
BAD_CACHE = FIXTURES / "llm_cache_bad_citation"

FABRICATED_CLAUSE = "org_policy:99-99"


def _line(prompt: str, label: str) -> str:
    m = re.search(rf"^{re.escape(label)}: (.*)$", prompt, re.M)
    return m.group(1).strip() if m else ""


def _refs(prompt: str, label: str) -> list[str]:
    raw = _line(prompt, label)
    if not raw or raw == "none":
        return []
    return [r.strip() for r in raw.split(",") if r.strip()]


def scripted_transport(request_body: dict) -> str:
    """Stand-in model: grounded, citation-bearing prose per template."""
    prompt = request_body["messages"][0]["content"]
    event_refs = _refs(prompt, "Available record refs")
    clause_refs = _refs(prompt, "Available clause refs")

    if "Failed logon count" in prompt and "Technique:" not in prompt:
        account = _line(prompt, "Account")
        count = _line(prompt, "Failed logon count")
        window = _line(prompt, "Window (UTC)")
        success = _line(prompt, "Subsequent successful logon")
        cites = f"[EVT:{event_refs[0]}] through [EVT:{event_refs[-2]}]"
        text = (
            f"The account '{account}' was targeted by a rapid sequence of "
            f"{count} failed logon attempts between {window} "
            f"({cites}), all originating from a single external address. "
        )
        if success.startswith("yes"):
            ref = success.split("record", 1)[1].strip()
            text += (
                f"The burst ended with a successful logon for the same "
                f"account [EVT:{ref}], indicating the credential was "
                f"ultimately guessed. "
            )
        text += (
            "The tight spacing and uniform source are characteristic of an "
            "automated credential-guessing tool rather than user error."
        )
        return text

    if "Technique:" in prompt:
        technique = _line(prompt, "Technique")
        account = _line(prompt, "Account")
        count = _line(prompt, "Failed logon count")
        return (
            f"The evidence shows {count} systematic authentication failures "
            f"against '{account}' in under a minute ([EVT:{event_refs[0]}] "
            f"through [EVT:{event_refs[-1]}]), which matches {technique}: an "
            f"adversary iterating candidate credentials against a single "
            f"account. The immediately following success confirms access was "
            f"obtained through guessing rather than a stolen session."
        )

    if "Control:" in prompt:
        control = _line(prompt, "Control")
        gap_kind = _line(prompt, "Gap kind")
        org = _line(prompt, "Organisation position")
        baseline = _line(prompt, "Baseline requirement")
        pol_org = f"[POL:{clause_refs[0]}]" if clause_refs else ""
        pol_base = f"[POL:{clause_refs[-1]}]" if clause_refs else ""
        return (
            f"RATIONALE: The organisation's {control} of {org} {pol_org} is "
            f"{gap_kind.lower()} against the baseline requirement of "
            f"{baseline} {pol_base}. The attack recorded "
            f"[EVT:{event_refs[0]}] through [EVT:{event_refs[-1]}] proceeded "
            f"without interruption, which is exactly the exposure this "
            f"control exists to limit.\n\n"
            f"REMEDIATION: Tighten {control} to meet the baseline value of "
            f"{baseline} {pol_base} and verify the setting is enforced on "
            f"all domain-joined hosts."
        )

    findings = _line(prompt, "Behaviour findings")
    techniques = _line(prompt, "Technique attributions")
    gaps = _line(prompt, "Policy gaps")
    text = (
        f"This review examined a credential-guessing incident: {findings} "
        f"([EVT:{event_refs[0]}] through [EVT:{event_refs[-1]}]), attributed "
        f"to {techniques}. "
    )
    if gaps not in ("", "none identified"):
        text += (
            f"The incident was possible in part because of policy gaps: "
            f"{gaps}; see {' and '.join(f'[POL:{c}]' for c in clause_refs[:2])}. "
            f"Remediating these controls would materially reduce the "
            f"likelihood of recurrence."
        )
    else:
        text += (
            "Policy comparison against the baseline identified no gaps; "
            "follow-up should focus on credential hygiene for the targeted "
            "account."
        )
    return text


def record(config_path: Path, org_override: str | None = None) -> None:
    raw = json.loads(config_path.read_text(encoding="utf-8"))
    if org_override:
        raw["org_policy_paths"] = [org_override]
    raw["gateway_mode"] = "record"
    raw["output_dir"] = "/tmp/record_fixture_cache"
    config = ReviewConfig.from_dict(raw, config_path.parent)
    state = run_review(config, transport=scripted_transport)
    print(
        f"recorded {len(state.transcripts)} transcript(s) "
        f"({config_path.name}, org={org_override or 'default'})"
    )


def derive_bad_citation_cache() -> None:
    if BAD_CACHE.exists():
        shutil.rmtree(BAD_CACHE)
    shutil.copytree(CACHE, BAD_CACHE)
    poisoned = 0
    for path in sorted(BAD_CACHE.glob("*.json")):
        entry = json.loads(path.read_text(encoding="utf-8"))
        if entry["template_id"] != "gap_rationale":
            continue
        if "LockoutThreshold" not in entry["rendered_prompt"]:
            continue
        entry["response"] = entry["response"].replace(
            "[POL:org_policy:5-5]", f"[POL:{FABRICATED_CLAUSE}]", 1
        )
        path.write_text(
            json.dumps(entry, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
        poisoned += 1
    if poisoned != 1:
        raise SystemExit(f"expected to poison exactly 1 entry, got {poisoned}")
    print(f"derived {BAD_CACHE} with fabricated clause {FABRICATED_CLAUSE}")


def main() -> None:
    if CACHE.exists():
        shutil.rmtree(CACHE)
    CACHE.mkdir(parents=True)
    record(FIXTURES / "review_config.json")
    record(FIXTURES / "review_config.json", org_override="policies/org_equals_baseline.md")
    derive_bad_citation_cache()
    print(f"cache entries: {len(list(CACHE.glob('*.json')))}")


if __name__ == "__main__":
    main()
