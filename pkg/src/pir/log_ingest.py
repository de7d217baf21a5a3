"""Evidence ingestion: EVTX container framing, event XML, and flattened CSV.

Three input paths feed the review with the same normalized records:

* raw ``.evtx`` files get an integrity check only (header magic and chunk
  census; record bodies are binary XML and are deliberately not decoded),
* XML exports in the standard Windows event schema are parsed fully,
* flattened CSV (as produced by :func:`flatten_to_csv`) round-trips back.

Every record carries a stable ``record_ref`` of the form
``<source_file>#<ordinal>`` (ordinals are 1-based document positions) so
downstream findings and reports can cite it.
"""

from __future__ import annotations

import csv
import io
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime

from .canon import format_instant, parse_instant
from .errors import (
    CsvSchemaError,
    MalformedContainerError,
    MissingSystemFieldError,
    XmlSyntaxError,
)

logger = logging.getLogger(__name__)

# EVTX framing constants; only these facts about the binary format are used.
EVTX_FILE_MAGIC = b"ElfFile\x00"
EVTX_CHUNK_MAGIC = b"ElfChnk\x00"
EVTX_HEADER_SIZE = 4096
EVTX_CHUNK_SIZE = 65536

# Windows Security-log identifiers for failed / successful logons.
EVENT_ID_LOGON_SUCCESS = 4624
EVENT_ID_LOGON_FAILURE = 4625
AUTH_EVENT_IDS = frozenset({EVENT_ID_LOGON_SUCCESS, EVENT_ID_LOGON_FAILURE})

# Fixed leading columns of the flattened CSV; event fields follow, sorted.
CSV_FIXED_COLUMNS = ("record_ref", "event_id", "timestamp_utc", "channel", "provider")


@dataclass
class ContainerSummary:
    """Integrity report for a raw EVTX file (framing only)."""

    file_path: str
    header_magic_valid: bool
    chunk_count: int
    declared_record_count: int
    warnings: list[str] = field(default_factory=list)


@dataclass
class EventRecord:
    """One parsed log record; the evidence atom everything else cites."""

    record_ref: str
    event_id: int
    timestamp_utc: datetime
    channel: str
    provider: str
    fields: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "record_ref": self.record_ref,
            "event_id": self.event_id,
            "timestamp_utc": format_instant(self.timestamp_utc),
            "channel": self.channel,
            "provider": self.provider,
            "fields": dict(self.fields),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EventRecord":
        return cls(
            record_ref=d["record_ref"],
            event_id=int(d["event_id"]),
            timestamp_utc=parse_instant(d["timestamp_utc"]),
            channel=d["channel"],
            provider=d["provider"],
            fields=dict(d.get("fields", {})),
        )


@dataclass
class AuthEvent:
    """Normalized view of a 4624/4625 record."""

    record_ref: str
    outcome: str  # "Failure" (4625) or "Success" (4624)
    account: str
    source_ip: str | None
    logon_type: int | None
    timestamp_utc: datetime

    def to_dict(self) -> dict:
        return {
            "record_ref": self.record_ref,
            "outcome": self.outcome,
            "account": self.account,
            "source_ip": self.source_ip,
            "logon_type": self.logon_type,
            "timestamp_utc": format_instant(self.timestamp_utc),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuthEvent":
        return cls(
            record_ref=d["record_ref"],
            outcome=d["outcome"],
            account=d["account"],
            source_ip=d.get("source_ip"),
            logon_type=d.get("logon_type"),
            timestamp_utc=parse_instant(d["timestamp_utc"]),
        )


def validate_evtx_container(data: bytes, file_path: str = "<bytes>") -> ContainerSummary:
    """Check EVTX framing: header magic, declared counts, chunk census.

    Record bodies are never decoded. Raises MalformedContainerError when the
    file is shorter than the 4096-byte header or the header magic is wrong.
    """
    if len(data) < EVTX_HEADER_SIZE:
        raise MalformedContainerError(
            f"{file_path}: {len(data)} bytes is shorter than the "
            f"{EVTX_HEADER_SIZE}-byte EVTX header"
        )
    if data[:8] != EVTX_FILE_MAGIC:
        raise MalformedContainerError(
            f"{file_path}: header magic {data[:8]!r} != {EVTX_FILE_MAGIC!r}"
        )

    warnings: list[str] = []
    # Header fields consumed for the census: next record id (uint64 LE at
    # offset 24) and declared chunk count (uint16 LE at offset 42).
    next_record_id = int.from_bytes(data[24:32], "little")
    declared_record_count = max(next_record_id - 1, 0)
    declared_chunks = int.from_bytes(data[42:44], "little")

    chunk_count = 0
    offset = EVTX_HEADER_SIZE
    region = 0
    while offset < len(data):
        region += 1
        chunk = data[offset : offset + EVTX_CHUNK_SIZE]
        if len(chunk) < EVTX_CHUNK_SIZE:
            warnings.append(
                f"trailing {len(chunk)}-byte region after chunk {region - 1} "
                f"is shorter than a full chunk"
            )
            break
        if chunk[:8] == EVTX_CHUNK_MAGIC:
            chunk_count += 1
        else:
            warnings.append(f"chunk region {region} has invalid signature")
        offset += EVTX_CHUNK_SIZE

    if declared_chunks != chunk_count:
        warnings.append(
            f"header declares {declared_chunks} chunk(s) but {chunk_count} "
            f"valid chunk signature(s) found"
        )
    return ContainerSummary(
        file_path=file_path,
        header_magic_valid=True,
        chunk_count=chunk_count,
        declared_record_count=declared_record_count,
        warnings=warnings,
    )


def _local(tag: str) -> str:
    """Strip any XML namespace from a tag name."""
    return tag.rsplit("}", 1)[-1]


def _parse_root(text: str) -> ET.Element:
    try:
        return ET.fromstring(text)
    except ET.ParseError as first:
        # Windows exports often concatenate <Event> elements with no root.
        try:
            return ET.fromstring(f"<Events>{text}</Events>")
        except ET.ParseError:
            line, column = first.position
            raise XmlSyntaxError(
                f"malformed event XML at line {line}, column {column}: {first}",
                line=line,
                column=column,
            ) from first


def parse_event_xml(text: str, source: str = "<string>") -> list[EventRecord]:
    """Parse Windows event-export XML into records, in document order.

    ``source`` names the originating file; ordinals are assigned by position
    so ``record_ref`` is ``<source>#<n>`` with n starting at 1. EventData
    ``Data`` elements flatten into ``fields`` keyed by their Name attribute.

    Raises XmlSyntaxError on malformed markup and MissingSystemFieldError
    when an Event lacks a usable EventID or TimeCreated (records are never
    silently dropped).
    """
    if not text.strip():
        return []
    root = _parse_root(text)
    if _local(root.tag) == "Event":
        event_elems = [root]
    else:
        event_elems = [el for el in root.iter() if _local(el.tag) == "Event"]

    records: list[EventRecord] = []
    for ordinal, event in enumerate(event_elems, start=1):
        ref = f"{source}#{ordinal}"
        system = None
        for child in event:
            if _local(child.tag) == "System":
                system = child
                break
        if system is None:
            raise MissingSystemFieldError(f"{ref}: Event has no System section")

        event_id_text: str | None = None
        time_text: str | None = None
        channel = ""
        provider = ""
        for child in system:
            name = _local(child.tag)
            if name == "EventID":
                event_id_text = (child.text or "").strip()
            elif name == "TimeCreated":
                time_text = child.attrib.get("SystemTime")
            elif name == "Channel":
                channel = (child.text or "").strip()
            elif name == "Provider":
                provider = child.attrib.get("Name", "").strip()

        if not event_id_text:
            raise MissingSystemFieldError(f"{ref}: EventID absent")
        try:
            event_id = int(event_id_text)
        except ValueError:
            raise MissingSystemFieldError(
                f"{ref}: EventID {event_id_text!r} is not an integer"
            ) from None
        if event_id < 0:
            raise MissingSystemFieldError(f"{ref}: EventID {event_id} is negative")
        if not time_text:
            raise MissingSystemFieldError(f"{ref}: TimeCreated/@SystemTime absent")
        try:
            timestamp = parse_instant(time_text)
        except ValueError:
            raise MissingSystemFieldError(
                f"{ref}: TimeCreated {time_text!r} is not a parseable timestamp"
            ) from None
        if "+" not in time_text and not time_text.rstrip().endswith(("Z", "z")):
            logger.warning("%s: offset-free timestamp %r assumed UTC", ref, time_text)

        fields: dict[str, str] = {}
        for child in event:
            if _local(child.tag) != "EventData":
                continue
            for data in child:
                if _local(data.tag) != "Data":
                    continue
                name = data.attrib.get("Name")
                if name:
                    fields[name] = data.text or ""

        records.append(
            EventRecord(
                record_ref=ref,
                event_id=event_id,
                timestamp_utc=timestamp,
                channel=channel,
                provider=provider,
                fields=fields,
            )
        )
    return records


def flatten_to_csv(records: list[EventRecord]) -> str:
    """Flatten records to deterministic RFC-4180 CSV.

    Column order is the fixed prefix followed by the union of field keys
    sorted lexicographically; output is byte-identical for identical input.
    """
    field_keys = sorted({k for r in records for k in r.fields})
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\r\n")
    writer.writerow(list(CSV_FIXED_COLUMNS) + field_keys)
    for r in records:
        row = [
            r.record_ref,
            str(r.event_id),
            format_instant(r.timestamp_utc),
            r.channel,
            r.provider,
        ]
        row.extend(r.fields.get(k, "") for k in field_keys)
        writer.writerow(row)
    return out.getvalue()


def load_csv(text: str) -> list[EventRecord]:
    """Rebuild records from flattened CSV; empty cells become absent fields.

    Raises CsvSchemaError when the fixed header prefix is wrong or a cell
    violates its column type.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CsvSchemaError("CSV has no header row") from None
    if tuple(header[: len(CSV_FIXED_COLUMNS)]) != CSV_FIXED_COLUMNS:
        raise CsvSchemaError(
            f"header must start with {','.join(CSV_FIXED_COLUMNS)}; "
            f"got {','.join(header[:len(CSV_FIXED_COLUMNS)])}"
        )
    field_keys = header[len(CSV_FIXED_COLUMNS) :]

    records: list[EventRecord] = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CsvSchemaError(
                f"row {lineno}: {len(row)} cells, header has {len(header)}"
            )
        ref, event_id_text, ts_text, channel, provider = row[: len(CSV_FIXED_COLUMNS)]
        try:
            event_id = int(event_id_text)
        except ValueError:
            raise CsvSchemaError(
                f"row {lineno}: event_id {event_id_text!r} is not an integer"
            ) from None
        try:
            timestamp = parse_instant(ts_text)
        except ValueError:
            raise CsvSchemaError(
                f"row {lineno}: timestamp_utc {ts_text!r} unparseable"
            ) from None
        fields = {
            k: v
            for k, v in zip(field_keys, row[len(CSV_FIXED_COLUMNS) :])
            if v != ""
        }
        records.append(
            EventRecord(
                record_ref=ref,
                event_id=event_id,
                timestamp_utc=timestamp,
                channel=channel,
                provider=provider,
                fields=fields,
            )
        )
    return records


def normalize_auth_events(records: list[EventRecord]) -> tuple[list[AuthEvent], int]:
    """Project 4624/4625 records into AuthEvents sorted by (time, ref).

    Returns the events plus a count of auth records skipped for lacking a
    TargetUserName (counted, never silently lost).
    """
    events: list[AuthEvent] = []
    skipped = 0
    for r in records:
        if r.event_id not in AUTH_EVENT_IDS:
            continue
        account = r.fields.get("TargetUserName", "").strip()
        if not account:
            skipped += 1
            continue
        source_ip = r.fields.get("IpAddress", "").strip()
        if source_ip in ("", "-"):
            source_ip = None
        logon_type: int | None = None
        raw_logon = r.fields.get("LogonType", "").strip()
        if raw_logon:
            try:
                logon_type = int(raw_logon)
            except ValueError:
                logon_type = None
        events.append(
            AuthEvent(
                record_ref=r.record_ref,
                outcome="Failure" if r.event_id == EVENT_ID_LOGON_FAILURE else "Success",
                account=account,
                source_ip=source_ip,
                logon_type=logon_type,
                timestamp_utc=r.timestamp_utc,
            )
        )
    events.sort(key=lambda e: (e.timestamp_utc, e.record_ref))
    return events, skipped
