"""Command-line interface for review runs and stage-wise helpers.

Exit codes are a stable contract: 0 success, 2 stage/runtime failure (also
argparse usage errors), 3 invalid configuration. Failures additionally write
one structured JSON object to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .canon import canon_dumps, parse_instant
from .config import ReviewConfig
from .detection import detect_bruteforce
from .errors import ConfigInvalidError, ReviewError, StageFailureError
from .llm_gateway import GATEWAY_MODES
from .log_ingest import (
    flatten_to_csv,
    load_csv,
    normalize_auth_events,
    parse_event_xml,
    validate_evtx_container,
)
from .orchestrator import (
    ingest_policy_file,
    load_checkpoint,
    run_review,
    write_report_files,
)
from .policy_index import DOC_KIND_BASELINE, DOC_KIND_ORGANISATION, build_index
from .scenario_gen import ScenarioSpec, generate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_FAILURE = 2
EXIT_CONFIG_INVALID = 3


def _emit_error(exc: Exception) -> None:
    payload = {"error": type(exc).__name__, "detail": str(exc)}
    if isinstance(exc, StageFailureError):
        payload["stage"] = exc.stage
        payload["cause"] = type(exc.cause).__name__
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _require_config(args) -> ReviewConfig:
    if not args.config:
        raise ConfigInvalidError("this command requires --config")
    overrides = {}
    if args.output:
        overrides["output_dir"] = str(Path(args.output).resolve())
    if args.gateway_mode:
        overrides["gateway_mode"] = args.gateway_mode
    return ReviewConfig.from_file(Path(args.config), overrides=overrides)


def _output_dir(args, config: ReviewConfig | None) -> Path:
    if args.output:
        return Path(args.output).resolve()
    if config is not None:
        return config.output_dir
    raise ConfigInvalidError("this command requires --output or --config")


def _load_records(config: ReviewConfig):
    """Evidence-file dispatch shared by the ingest and detect commands."""
    records = []
    for path in config.evidence_paths:
        if not path.is_file():
            raise ConfigInvalidError(f"evidence path not found: {path}")
        suffix = path.suffix.lower()
        if suffix == ".evtx":
            summary = validate_evtx_container(path.read_bytes(), path.name)
            logger.info(
                "container %s: %d chunk(s), %d declared record(s)",
                path.name,
                summary.chunk_count,
                summary.declared_record_count,
            )
        elif suffix == ".xml":
            records.extend(parse_event_xml(path.read_text(encoding="utf-8"), source=path.stem))
        elif suffix == ".csv":
            records.extend(load_csv(path.read_text(encoding="utf-8")))
        else:
            raise ConfigInvalidError(f"unsupported evidence suffix: {path}")
    return records


def cmd_review(args) -> int:
    config = _require_config(args)
    state = run_review(config)
    json_path = config.output_dir / "report.json"
    print(
        f"review {state.run_id} complete: {len(state.findings)} finding(s), "
        f"{len(state.gaps)} gap(s), {len(state.degradation_notes)} "
        f"degradation note(s); report written to {json_path}"
    )
    return EXIT_OK


def cmd_ingest(args) -> int:
    config = _require_config(args)
    if not config.evidence_paths:
        raise ConfigInvalidError("config lists no evidence_paths")
    records = _load_records(config)
    out_dir = _output_dir(args, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "records.csv"
    out_path.write_text(flatten_to_csv(records), encoding="utf-8", newline="")
    print(f"ingested {len(records)} record(s) into {out_path}")
    return EXIT_OK


def cmd_detect(args) -> int:
    config = _require_config(args)
    if not config.evidence_paths:
        raise ConfigInvalidError("config lists no evidence_paths")
    records = _load_records(config)
    events, skipped = normalize_auth_events(records)
    findings = detect_bruteforce(events, config.detector)
    out_dir = _output_dir(args, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "findings.json"
    out_path.write_text(
        canon_dumps([f.to_dict() for f in findings]) + "\n", encoding="utf-8"
    )
    print(
        f"detected {len(findings)} finding(s) from {len(events)} auth event(s) "
        f"({skipped} skipped); written to {out_path}"
    )
    return EXIT_OK


def cmd_index(args) -> int:
    config = _require_config(args)
    if not config.org_policy_paths and not config.baseline_policy_paths:
        raise ConfigInvalidError("config lists no policy documents to index")
    documents = [
        ingest_policy_file(p, DOC_KIND_ORGANISATION) for p in config.org_policy_paths
    ]
    documents.extend(
        ingest_policy_file(p, DOC_KIND_BASELINE)
        for p in config.baseline_policy_paths
    )
    index = build_index(documents)
    out_dir = _output_dir(args, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "policy_index.json"
    out_path.write_text(index.to_json(), encoding="utf-8")
    print(
        f"indexed {len(index.clauses)} clause(s) from {len(documents)} "
        f"document(s); written to {out_path}"
    )
    return EXIT_OK


def cmd_gen_scenario(args) -> int:
    config = ReviewConfig.from_file(Path(args.config)) if args.config else None
    out_dir = _output_dir(args, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        spec = ScenarioSpec(
            seed=args.seed,
            target_account=args.account,
            failure_count=args.failures,
            failure_spacing_seconds=args.spacing,
            include_success=not args.no_success,
            noise_events=args.noise,
            noise_accounts=tuple(args.noise_account or ()),
            start_time=(
                ScenarioSpec().start_time
                if args.start is None
                else parse_instant(args.start)
            ),
        )
    except ValueError as exc:
        raise ConfigInvalidError(str(exc)) from exc
    xml, truth = generate(spec, source_name=args.name)
    xml_path = out_dir / f"{args.name}.xml"
    truth_path = out_dir / f"{args.name}.truth.json"
    xml_path.write_text(xml, encoding="utf-8")
    truth_path.write_text(
        json.dumps(
            {"spec": spec.to_dict(), "truth": truth.to_dict()},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    print(f"generated {xml_path} and {truth_path}")
    return EXIT_OK


def cmd_render(args) -> int:
    config = ReviewConfig.from_file(Path(args.config)) if args.config else None
    if args.state:
        state_path = Path(args.state)
    elif config is not None:
        state_path = config.output_dir / "state" / "GenerateReport.json"
    else:
        raise ConfigInvalidError("render requires --state or --config")
    if not state_path.is_file():
        raise ConfigInvalidError(f"checkpoint not found: {state_path}")
    state = load_checkpoint(state_path)
    if args.output:
        out_dir = Path(args.output).resolve()
    elif config is not None:
        out_dir = config.output_dir
    else:
        out_dir = state_path.parent.parent
    json_path, md_path = write_report_files(state, out_dir)
    print(f"rendered {json_path} and {md_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a review config JSON file")
    common.add_argument("--output", help="output directory (overrides config)")
    common.add_argument(
        "--gateway-mode",
        choices=GATEWAY_MODES,
        help="LLM gateway mode (overrides config)",
    )
    common.add_argument(
        "--verbose", action="store_true", help="log progress detail to stderr"
    )

    parser = argparse.ArgumentParser(
        prog="pir",
        description="Post-incident review of Windows authentication evidence "
        "against security policy.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser(
        "review", parents=[common], help="run the full five-stage review"
    ).set_defaults(handler=cmd_review)
    sub.add_parser(
        "ingest", parents=[common], help="parse evidence files to flattened CSV"
    ).set_defaults(handler=cmd_ingest)
    sub.add_parser(
        "detect", parents=[common], help="run brute-force detection on evidence"
    ).set_defaults(handler=cmd_detect)
    sub.add_parser(
        "index", parents=[common], help="build the policy clause index"
    ).set_defaults(handler=cmd_index)

    gen = sub.add_parser(
        "gen-scenario", parents=[common], help="generate synthetic evidence"
    )
    gen.add_argument("--seed", type=int, default=1)
    gen.add_argument("--account", default="administrator")
    gen.add_argument("--failures", type=int, default=6)
    gen.add_argument("--spacing", type=int, default=10, help="seconds between failures")
    gen.add_argument(
        "--no-success",
        action="store_true",
        help="omit the trailing successful logon",
    )
    gen.add_argument("--noise", type=int, default=0, help="number of noise events")
    gen.add_argument(
        "--noise-account",
        action="append",
        help="account for noise events (repeatable)",
    )
    gen.add_argument("--start", help="attack start time (ISO-8601 UTC)")
    gen.add_argument("--name", default="scenario", help="output file stem")
    gen.set_defaults(handler=cmd_gen_scenario)

    render = sub.add_parser(
        "render", parents=[common], help="re-render a checkpointed review state"
    )
    render.add_argument("--state", help="path to a state checkpoint JSON")
    render.set_defaults(handler=cmd_render)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except ConfigInvalidError as exc:
        _emit_error(exc)
        return EXIT_CONFIG_INVALID
    except StageFailureError as exc:
        _emit_error(exc)
        return EXIT_STAGE_FAILURE
    except ReviewError as exc:
        _emit_error(exc)
        return EXIT_STAGE_FAILURE


if __name__ == "__main__":
    sys.exit(main())
