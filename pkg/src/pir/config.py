"""Review run configuration: JSON file plus CLI flag overrides (flags win).

Paths inside a config file resolve relative to the file's own directory so a
committed config reproduces the same run from any working directory. Secrets
never live here; credentials come from environment variables only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .canon import digest_of
from .detection import DetectorParams
from .errors import ConfigInvalidError
from .llm_gateway import ENV_MODEL, GATEWAY_MODES, MODE_REPLAY, GenerationParams

EVIDENCE_SUFFIXES = (".evtx", ".xml", ".csv")
POLICY_SUFFIXES = (".md", ".txt")


@dataclass
class ReviewConfig:
    evidence_paths: list[Path]
    org_policy_paths: list[Path]
    baseline_policy_paths: list[Path]
    output_dir: Path
    detector: DetectorParams = field(default_factory=DetectorParams)
    retrieval_k: int = 8
    gateway_mode: str = MODE_REPLAY
    generation: GenerationParams = field(default_factory=GenerationParams)
    cache_dir: Path = Path("llm_cache")
    catalog_path: Path | None = None
    refine_subtechniques: bool = False
    summarize_findings: bool = True
    digest: str = ""

    @classmethod
    def from_dict(
        cls, raw: dict, base_dir: Path, overrides: dict | None = None
    ) -> "ReviewConfig":
        """Build a config from parsed JSON; ``overrides`` maps field names
        (output_dir, gateway_mode) to values that win over the file."""
        effective = dict(raw)
        for key, value in (overrides or {}).items():
            if value is not None:
                effective[key] = value

        def _path(p) -> Path:
            candidate = Path(p)
            return candidate if candidate.is_absolute() else base_dir / candidate

        def _paths(key) -> list[Path]:
            vals = effective.get(key, [])
            if not isinstance(vals, list):
                raise ConfigInvalidError(f"config field {key!r} must be a list")
            return [_path(v) for v in vals]

        gw = effective.get("gateway", {})
        if not isinstance(gw, dict):
            raise ConfigInvalidError("config field 'gateway' must be an object")
        model_id = gw.get("model_id") or os.environ.get(ENV_MODEL) or "gpt-4o"
        try:
            detector = DetectorParams.from_dict(effective.get("detector", {}))
            generation = GenerationParams(
                model_id=model_id,
                temperature=float(gw.get("temperature", 0.0)),
                max_tokens=int(gw.get("max_tokens", 1024)),
                top_p=float(gw.get("top_p", 1.0)),
            )
        except (ValueError, TypeError) as exc:
            raise ConfigInvalidError(f"invalid parameter in config: {exc}") from exc

        mode = effective.get("gateway_mode") or gw.get("mode", MODE_REPLAY)
        output = effective.get("output_dir")
        if not output:
            raise ConfigInvalidError("config requires output_dir")

        # The digest covers the effective configuration (file + overrides) so
        # identical runs share a run id; raw values keep it machine-portable.
        effective["gateway"] = {**gw, "model_id": model_id, "mode": mode}
        config = cls(
            evidence_paths=_paths("evidence_paths"),
            org_policy_paths=_paths("org_policy_paths"),
            baseline_policy_paths=_paths("baseline_policy_paths"),
            output_dir=_path(output),
            detector=detector,
            retrieval_k=int(effective.get("retrieval_k", 8)),
            gateway_mode=mode,
            generation=generation,
            cache_dir=_path(gw.get("cache_dir", "llm_cache")),
            catalog_path=(
                _path(effective["catalog_path"])
                if effective.get("catalog_path")
                else None
            ),
            refine_subtechniques=bool(effective.get("refine_subtechniques", False)),
            summarize_findings=bool(effective.get("summarize_findings", True)),
            digest=digest_of(effective),
        )
        return config

    @classmethod
    def from_file(cls, path: Path, overrides: dict | None = None) -> "ReviewConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigInvalidError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalidError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigInvalidError(f"config {path} must contain a JSON object")
        return cls.from_dict(raw, path.parent, overrides)

    def validate(self) -> None:
        """Check paths and uniqueness rules before any stage runs."""
        if not self.evidence_paths:
            raise ConfigInvalidError("config lists no evidence_paths")
        if not self.org_policy_paths:
            raise ConfigInvalidError("config lists no org_policy_paths")
        if not self.baseline_policy_paths:
            raise ConfigInvalidError("config lists no baseline_policy_paths")
        if self.retrieval_k < 1:
            raise ConfigInvalidError(f"retrieval_k must be >= 1, got {self.retrieval_k}")
        if self.gateway_mode not in GATEWAY_MODES:
            raise ConfigInvalidError(
                f"gateway mode must be one of {GATEWAY_MODES}, "
                f"got {self.gateway_mode!r}"
            )

        for p in self.evidence_paths:
            if not p.is_file():
                raise ConfigInvalidError(f"evidence path not found: {p}")
            if p.suffix.lower() not in EVIDENCE_SUFFIXES:
                raise ConfigInvalidError(
                    f"evidence path {p} must end in one of {EVIDENCE_SUFFIXES}"
                )
        for p in [*self.org_policy_paths, *self.baseline_policy_paths]:
            if not p.is_file():
                raise ConfigInvalidError(f"policy path not found: {p}")
            if p.suffix.lower() not in POLICY_SUFFIXES:
                raise ConfigInvalidError(
                    f"policy path {p} must end in one of {POLICY_SUFFIXES}"
                )
        if self.catalog_path is not None and not self.catalog_path.is_file():
            raise ConfigInvalidError(f"catalog path not found: {self.catalog_path}")
        if self.gateway_mode == MODE_REPLAY and not self.cache_dir.is_dir():
            raise ConfigInvalidError(
                f"replay mode needs an existing cache dir: {self.cache_dir}"
            )

        # Record refs and clause ids are keyed by file stem; collisions would
        # alias citations.
        stems = [p.stem for p in self.evidence_paths]
        if len(set(stems)) != len(stems):
            raise ConfigInvalidError(
                f"evidence file stems must be unique, got {stems}"
            )
        doc_ids = [p.stem for p in [*self.org_policy_paths, *self.baseline_policy_paths]]
        if len(set(doc_ids)) != len(doc_ids):
            raise ConfigInvalidError(
                f"policy file stems must be unique across org and baseline, "
                f"got {doc_ids}"
            )

        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigInvalidError(
                f"cannot create output dir {self.output_dir}: {exc}"
            ) from exc
        if not os.access(self.output_dir, os.W_OK):
            raise ConfigInvalidError(f"output dir {self.output_dir} is not writable")
