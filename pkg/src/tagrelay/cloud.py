"""The simulated offline-finding cloud.

Stores encrypted reports by key ID and hands them back to whoever asks.
It never holds a private key and never looks inside a ciphertext, so it
cannot tell a genuine report from a relayed or fabricated one.
"""

from __future__ import annotations

import json
import threading
import time
from bisect import bisect_left
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .errors import CodecError, ProtocolError
from .framing import FramedClient
from .reports import EncryptedReport
from .server import FramedService, Session

MAX_FETCH_KEYS = 64


@dataclass(frozen=True)
class ReportRecord:
    report: EncryptedReport
    received_at: float
    report_seq: int

    def to_json(self) -> dict[str, Any]:
        return {
            "report": self.report.to_wire().hex(),
            "received_at": self.received_at,
            "report_seq": self.report_seq,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> ReportRecord:
        return cls(
            report=_parse_wire(obj["report"]),
            received_at=obj["received_at"],
            report_seq=int(obj["report_seq"]),
        )


def _parse_wire(data: bytes | str) -> EncryptedReport:
    try:
        raw = bytes.fromhex(data) if isinstance(data, str) else bytes(data)
        report = EncryptedReport.from_wire(raw)
    except (ValueError, CodecError) as exc:
        raise ProtocolError(f"malformed report: {exc}") from exc
    return report


def _check_report(report: EncryptedReport) -> None:
    if len(report.key_id) != 32 or len(report.ephemeral_public) != 32 or len(report.nonce) != 12:
        raise ProtocolError("malformed report: bad field lengths")
    if len(report.ciphertext) > 0xFFFF:
        raise ProtocolError("malformed report: ciphertext too long")


class CloudStore:
    """In-memory report index with an optional append-only journal.

    Writes are serialized by a lock; ``fetch`` copies out under the same
    lock so readers always see a consistent snapshot.
    """

    def __init__(self, journal: str | Path | None = None):
        self._lock = threading.Lock()
        self._records: list[ReportRecord] = []
        self._by_key: dict[bytes, list[ReportRecord]] = defaultdict(list)
        # per-key received_at, for bisecting while arrivals stay time-ordered
        self._times: dict[bytes, list[float]] = defaultdict(list)
        self._unordered: set[bytes] = set()
        self._journal_path = Path(journal) if journal is not None else None
        self._journal = None
        if self._journal_path is not None:
            if self._journal_path.exists():
                self._replay_journal(self._journal_path)
            self._journal = self._journal_path.open("a", encoding="utf-8")

    def _replay_journal(self, path: Path) -> None:
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    self._insert(ReportRecord.from_json(json.loads(line)))

    def _insert(self, record: ReportRecord) -> None:
        kid = record.report.key_id
        times = self._times[kid]
        if times and record.received_at < times[-1]:
            self._unordered.add(kid)
        self._records.append(record)
        self._by_key[kid].append(record)
        times.append(record.received_at)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def next_seq(self) -> int:
        return self._records[-1].report_seq + 1 if self._records else 1

    def upload(self, report: EncryptedReport | bytes | str, now: float) -> int:
        if not isinstance(report, EncryptedReport):
            report = _parse_wire(report)
        _check_report(report)
        with self._lock:
            record = ReportRecord(report=report, received_at=now, report_seq=self.next_seq)
            self._insert(record)
            if self._journal is not None:
                self._journal.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
                self._journal.flush()
        return record.report_seq

    def fetch(self, key_ids: Iterable[bytes], since: float = 0) -> list[ReportRecord]:
        key_ids = list(key_ids)
        if not 1 <= len(key_ids) <= MAX_FETCH_KEYS:
            raise ProtocolError(f"fetch needs 1..{MAX_FETCH_KEYS} key ids, got {len(key_ids)}")
        out: list[ReportRecord] = []
        with self._lock:
            for kid in set(map(bytes, key_ids)):
                records = self._by_key.get(kid, ())
                if kid in self._unordered:
                    out.extend(r for r in records if r.received_at >= since)
                elif records:
                    out.extend(records[bisect_left(self._times[kid], since):])
        out.sort(key=lambda r: r.report_seq)
        return out

    def all_records(self) -> list[ReportRecord]:
        with self._lock:
            return list(self._records)

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()
            self._journal = None


class CloudService(FramedService):
    """Wire front-end. ``now`` in a request overrides the wall clock."""

    def __init__(self, store: CloudStore, clock=time.time):
        super().__init__()
        self.store = store
        self.clock = clock

    async def handle(self, message: dict[str, Any], session: Session) -> dict[str, Any]:
        op = message.get("op")
        now = message.get("now")
        if now is None:
            now = self.clock()
        if op == "upload":
            if "report" not in message:
                raise ProtocolError("upload needs a report field")
            seq = self.store.upload(str(message["report"]), now)
            return {"ok": True, "op": "upload", "report_seq": seq}
        if op == "fetch":
            key_ids = message.get("key_ids")
            if not isinstance(key_ids, list):
                raise ProtocolError("fetch needs a key_ids list")
            try:
                keys = [bytes.fromhex(k) for k in key_ids]
            except (TypeError, ValueError) as exc:
                raise ProtocolError(f"bad key id hex: {exc}") from exc
            records = self.store.fetch(keys, float(message.get("since", 0)))
            return {"ok": True, "op": "fetch", "records": [r.to_json() for r in records]}
        raise ProtocolError(f"unknown op: {op!r}")


class CloudClient(FramedClient):
    """Blocking client; ``fetch`` mirrors :meth:`CloudStore.fetch`."""

    def _call(self, message: dict[str, Any]) -> dict[str, Any]:
        reply = self.request(message)
        if not reply.get("ok"):
            raise ProtocolError(reply.get("error", "request failed"))
        return reply

    def upload(self, report: EncryptedReport | bytes, now: float | None = None) -> int:
        wire = report.to_wire() if isinstance(report, EncryptedReport) else bytes(report)
        message: dict[str, Any] = {"op": "upload", "report": wire.hex()}
        if now is not None:
            message["now"] = now
        return self._call(message)["report_seq"]

    def fetch(self, key_ids: Iterable[bytes], since: float = 0) -> list[ReportRecord]:
        reply = self._call({"op": "fetch", "key_ids": [k.hex() for k in key_ids], "since": since})
        return [ReportRecord.from_json(r) for r in reply["records"]]
