"""Append-only local result store plus the publish client.

The store is a newline-delimited file of canonical-JSON documents: one
`{"seq": n, "written_at": ts, "doc": <result doc>}` per line. It is
inspectable with standard tools, diff-friendly, and tolerates a truncated
final line (at most that one document is lost).
"""

import json
import logging
import os
import time
from dataclasses import dataclass

from .errors import ConfigError, StoreError, ValidationError
from .yamlio import canonical_json

log = logging.getLogger(__name__)


def store_path(out_dir, study_id):
    return os.path.join(out_dir, "results", f"{study_id}.ndjson")


class Store:
    """Single-writer append-only document store."""

    def __init__(self, path):
        self.path = path
        self._next_seq = None

    def _scan_next_seq(self):
        seq = 0
        if os.path.exists(self.path):
            records, _ = read_store(self.path)
            if records:
                seq = max(r["seq"] for r in records) + 1
        return seq

    def append(self, doc):
        """Append one result doc; returns its sequence number.

        The line is flushed and fsynced before returning.
        """
        if self._next_seq is None:
            os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
            self._next_seq = self._scan_next_seq()
        record = {
            "seq": self._next_seq,
            "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "doc": doc,
        }
        try:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(canonical_json(record) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise StoreError(f"cannot append to store {self.path}: {exc}")
        self._next_seq += 1
        return record["seq"]


def read_store(path):
    """All intact records plus the number of corrupt lines skipped."""
    records = []
    skipped = 0
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    if not isinstance(rec, dict) or "doc" not in rec or "seq" not in rec:
                        raise ValueError("missing store fields")
                except ValueError:
                    skipped += 1
                    continue
                records.append(rec)
    except OSError as exc:
        raise StoreError(f"cannot read store {path}: {exc}")
    if skipped:
        log.warning("store %s: skipped %d corrupt line(s)", path, skipped)
    records.sort(key=lambda r: r["seq"])
    return records, skipped


# ---------------------------------------------------------------------------
# Queries

OPERATORS = ("eq", "lt", "gt", "contains")


@dataclass(frozen=True)
class QueryClause:
    field_path: str
    op: str
    value: object

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise ValidationError(f"unknown query operator {self.op!r}; supported: {', '.join(OPERATORS)}")


def _resolve_path(record, path):
    """Field lookup against the stored record; bare names also resolve
    through doc, doc.envelope, and doc.trial so filters can say `model_id`
    or `test_metrics.accuracy` directly."""
    parts = path.split(".")
    doc = record.get("doc", {})
    roots = [record, doc, doc.get("envelope", {}), doc.get("trial", {})]
    for root in roots:
        node = root
        found = True
        for part in parts:
            if isinstance(node, dict) and part in node:
                node = node[part]
            else:
                found = False
                break
        if found:
            return True, node
    return False, None


def _clause_matches(record, clause):
    found, value = _resolve_path(record, clause.field_path)
    if not found:
        return False
    try:
        if clause.op == "eq":
            return value == clause.value
        if clause.op == "lt":
            return value < clause.value
        if clause.op == "gt":
            return value > clause.value
        if isinstance(value, str):
            return str(clause.value) in value
        if isinstance(value, (list, dict)):
            return clause.value in value
        return False
    except TypeError:
        return False


def query(path, clauses=()):
    """All stored docs satisfying every clause, in sequence order."""
    records, _ = read_store(path)
    return [r for r in records if all(_clause_matches(r, c) for c in clauses)]


def parse_clause(text):
    """CLI filter syntax: `<field> <op> <value>` (value coerced to a number
    when it looks like one)."""
    parts = text.split(None, 2)
    if len(parts) != 3:
        raise ValidationError(f"bad filter {text!r}; expected `<field> <op> <value>`")
    field_path, op, raw = parts
    value = raw
    try:
        value = int(raw)
    except ValueError:
        try:
            value = float(raw)
        except ValueError:
            pass
    return QueryClause(field_path=field_path, op=op, value=value)


# ---------------------------------------------------------------------------
# Publishing

@dataclass(frozen=True)
class PublishOutcome:
    seq: int
    ok: bool
    status_code: int
    attempts: int
    error: str = None


def publish_body(doc):
    """Canonical request body bytes for one result doc (wire format)."""
    return canonical_json(doc).encode("utf-8")


def publish(docs, target, _sleep=time.sleep, _post=None):
    """POST each doc to `{base_url}/{index}/_doc`, with retries.

    Up to `retry_count` attempts per doc with exponential backoff
    (0.5s, 1s, 2s, ...). A doc failing all attempts is recorded as a failed
    outcome; it never aborts the batch. A configured-but-missing auth env
    var aborts before any request is sent.
    """
    import requests

    headers = {"Content-Type": "application/json"}
    if target.auth_env:
        token = os.environ.get(target.auth_env)
        if not token:
            raise ConfigError(
                f"auth environment variable {target.auth_env!r} is not set"
            )
        headers["Authorization"] = f"Bearer {token}"

    if _post is None:
        _post = requests.post
    url = f"{target.base_url.rstrip('/')}/{target.index_name}/_doc"

    outcomes = []
    for i, doc in enumerate(docs):
        body = publish_body(doc)
        status, error = None, None
        attempts = 0
        ok = False
        for attempt in range(target.retry_count):
            attempts = attempt + 1
            try:
                resp = _post(url, data=body, headers=headers, timeout=target.timeout_s)
                status = resp.status_code
                if 200 <= resp.status_code < 300:
                    ok = True
                    break
                error = f"HTTP {resp.status_code}"
            except Exception as exc:
                error = str(exc)
            if attempt < target.retry_count - 1:
                _sleep(0.5 * (2 ** attempt))
        outcomes.append(PublishOutcome(
            seq=i, ok=ok, status_code=status if status is not None else 0,
            attempts=attempts, error=None if ok else error,
        ))
    return outcomes


# ---------------------------------------------------------------------------
# Snapshot export

def export_snapshot(path, study_id, model_id, dataset_id, out_path):
    """Rebuild an experiment snapshot from stored docs and write it.

    Requires a gap-free set of trial indices; missing indices are an error.
    """
    from . import config as cfg

    records = query(path, (
        QueryClause("envelope.study_id", "eq", study_id),
        QueryClause("envelope.model_id", "eq", model_id),
        QueryClause("envelope.dataset_id", "eq", dataset_id),
    ))
    if not records:
        raise StoreError(
            f"no stored docs for study={study_id} model={model_id} dataset={dataset_id}"
        )
    by_index = {}
    context = None
    envelope = None
    for rec in records:
        doc = rec["doc"]
        trial = doc["trial"]
        by_index.setdefault(trial["trial_index"], trial)
        context = doc["envelope"].get("context", context)
        envelope = doc["envelope"]
    missing = sorted(set(range(max(by_index) + 1)) - set(by_index))
    if missing:
        raise StoreError(
            f"incomplete trial set; missing trial indices: {', '.join(map(str, missing))}"
        )
    if not context:
        raise StoreError("stored docs carry no experiment context; cannot export")

    snapshot = cfg.ExperimentSnapshot(
        study_id=study_id, model_id=model_id, dataset_id=dataset_id,
        config_hash=envelope["config_hash"],
        toolkit_version=envelope["toolkit_version"],
        snapshot_version=cfg.SNAPSHOT_VERSION,
        task=context["task"], model=context["model"],
        goal_metric=context["goal_metric"], direction=context["direction"],
        suggestion_mode=context.get("suggestion_mode", "batch"),
        trials=tuple(
            {"trial_index": i, "seed": by_index[i]["seed"], "params": by_index[i]["params"]}
            for i in sorted(by_index)
        ),
    )
    return cfg.write_snapshot(snapshot, out_path)
