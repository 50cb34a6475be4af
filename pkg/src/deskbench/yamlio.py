"""Strict YAML-subset loading and canonical serialization.

Config files are plain YAML restricted to maps, sequences, and scalars.
Anchors, aliases, and multi-document streams are rejected so a document can
never contain hidden sharing or merge semantics. Canonical JSON (sorted keys,
compact separators) is the byte format backing hashes, stored documents, and
publish request bodies.
"""

import hashlib
import json

import yaml

from .errors import ConfigError


class _StrictLoader(yaml.SafeLoader):
    """SafeLoader with anchors and aliases disabled."""


def _reject_anchor(self):
    mark = self.get_mark()
    raise ConfigError(
        "anchors are not supported in config files", line=mark.line + 1
    )


def _reject_alias(self):
    mark = self.get_mark()
    raise ConfigError(
        "aliases are not supported in config files", line=mark.line + 1
    )


_StrictLoader.fetch_anchor = _reject_anchor
_StrictLoader.fetch_alias = _reject_alias


def load_yaml(text, source=None):
    """Parse one YAML document into plain Python data.

    Raises ConfigError with a 1-based line number on syntax errors, anchors,
    aliases, or multi-document input. An empty document yields {}.
    """
    try:
        docs = list(yaml.load_all(text, Loader=_StrictLoader))
    except ConfigError as exc:
        exc.source = source
        raise
    except yaml.YAMLError as exc:
        line = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"syntax error: {problem}", source=source, line=line)
    if len(docs) > 1:
        raise ConfigError("expected a single document", source=source)
    data = docs[0] if docs else None
    if data is None:
        return {}
    return data


def dump_yaml(data):
    """Serialize plain data to YAML with deterministic key order."""
    return yaml.safe_dump(data, sort_keys=True, allow_unicode=True)


def canonical_json(data):
    """Deterministic JSON encoding: sorted keys, no whitespace."""
    return json.dumps(
        data, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
        allow_nan=False,
    )


def canonical_json_bytes(data):
    return canonical_json(data).encode("utf-8")


def sha256_hex(data):
    """SHA-256 hex digest of the canonical JSON form of `data`."""
    return hashlib.sha256(canonical_json_bytes(data)).hexdigest()
