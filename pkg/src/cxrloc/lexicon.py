"""Lexicon for the rule-based report labeler.

The lexicon is a human-editable JSON file: finding entries (canonical child
name -> term variants), a child -> parent map, laterality and location
variants, negation/hypothetical cue phrases, conjunction-reset words, and
the default-location rule table. `cxrloc lexicon-check` validates a file
against the schema and invariants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

from .atlas import LOCATION_LABELS

LATERALITIES = ("left", "right", "bilateral")


class LexiconError(ValueError):
    pass


def normalize_term(term: str) -> tuple[str, ...]:
    """Lowercased alphanumeric token tuple; the unit of all matching."""
    out = []
    cur = []
    for ch in term.lower():
        if ch.isalnum():
            cur.append(ch)
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return tuple(out)


@dataclass
class Lexicon:
    finding_variants: dict[tuple[str, ...], str]          # variant tokens -> child
    parent_of: dict[str, str]                             # child -> parent
    laterality_variants: dict[tuple[str, ...], str]       # variant tokens -> left|right|bilateral
    location_variants: dict[tuple[str, ...], str]         # variant tokens -> one of the 17 labels
    combined_cues: dict[tuple[str, ...], tuple[str, frozenset]]  # tokens -> (laterality, labels)
    negation_cues: set[tuple[str, ...]] = field(default_factory=set)
    hypothetical_cues: set[tuple[str, ...]] = field(default_factory=set)
    conjunction_reset: set[str] = field(default_factory=set)
    abbreviations: set[str] = field(default_factory=set)
    defaults: dict[str, dict[str, frozenset]] = field(default_factory=dict)
    cue_window: int = 6

    def children(self) -> set[str]:
        return set(self.parent_of)


def _variant_map(entries: dict, what: str) -> dict[tuple[str, ...], str]:
    seen: dict[tuple[str, ...], str] = {}
    for key, variants in entries.items():
        if not variants:
            raise LexiconError(f"{what} entry '{key}' has no variants")
        for v in variants:
            toks = normalize_term(v)
            if not toks:
                raise LexiconError(f"{what} entry '{key}' has an empty variant")
            if toks in seen and seen[toks] != key:
                raise LexiconError(
                    f"duplicate {what} variant '{v}' maps to both '{seen[toks]}' and '{key}'")
            if toks in seen:
                raise LexiconError(f"{what} entry '{key}' repeats variant '{v}'")
            seen[toks] = key
    return seen


def load_lexicon(path=None) -> Lexicon:
    """Load and validate a lexicon file (defaults to the shipped one)."""
    if path is None:
        raw = resources.files("cxrloc.data").joinpath("lexicon.json").read_text()
    else:
        with open(path) as fh:
            raw = fh.read()
    if not raw.strip():
        raise LexiconError("empty lexicon file")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise LexiconError(f"malformed lexicon JSON: {exc}") from exc

    for section in ("findings", "laterality", "locations", "negation", "hypothetical", "defaults"):
        if section not in doc:
            raise LexiconError(f"lexicon missing section '{section}'")

    parent_of = {}
    finding_entries = {}
    for child, entry in doc["findings"].items():
        if "parent" not in entry:
            raise LexiconError(f"child finding '{child}' has no parent")
        parent_of[child] = entry["parent"]
        finding_entries[child] = entry.get("variants", [])
    finding_variants = _variant_map(finding_entries, "finding")

    lat_entries = doc["laterality"]
    bad_lat = set(lat_entries) - set(LATERALITIES)
    if bad_lat:
        raise LexiconError(f"unknown laterality keys: {sorted(bad_lat)}")
    laterality_variants = _variant_map(lat_entries, "laterality")

    loc_entries = doc["locations"]
    bad_loc = set(loc_entries) - set(LOCATION_LABELS)
    if bad_loc:
        raise LexiconError(f"unknown location labels: {sorted(bad_loc)}")
    if len(loc_entries) < len(LOCATION_LABELS):
        missing = set(LOCATION_LABELS) - set(loc_entries)
        raise LexiconError(f"locations section missing labels: {sorted(missing)}")
    location_variants = _variant_map(loc_entries, "location")

    combined = {}
    for cue, spec in doc.get("combined_cues", {}).items():
        lat = spec["laterality"]
        if lat not in LATERALITIES:
            raise LexiconError(f"combined cue '{cue}' has unknown laterality '{lat}'")
        labels = frozenset(spec["locations"])
        bad = labels - set(LOCATION_LABELS)
        if bad:
            raise LexiconError(f"combined cue '{cue}' has unknown locations {sorted(bad)}")
        combined[normalize_term(cue)] = (lat, labels)

    defaults = {}
    for child, table in doc["defaults"].items():
        if child not in parent_of:
            raise LexiconError(f"default rule for unknown finding '{child}'")
        rules = {}
        for lat_key, labels in table.items():
            if lat_key not in LATERALITIES + ("unspecified",):
                raise LexiconError(f"default rule for '{child}' has bad key '{lat_key}'")
            labels = frozenset(labels)
            bad = labels - set(LOCATION_LABELS)
            if bad:
                raise LexiconError(f"default rule for '{child}' has unknown locations {sorted(bad)}")
            if not labels:
                raise LexiconError(f"default rule for '{child}'/{lat_key} is empty")
            rules[lat_key] = labels
        defaults[child] = rules

    return Lexicon(
        finding_variants=finding_variants,
        parent_of=parent_of,
        laterality_variants=laterality_variants,
        location_variants=location_variants,
        combined_cues=combined,
        negation_cues={normalize_term(c) for c in doc["negation"]},
        hypothetical_cues={normalize_term(c) for c in doc["hypothetical"]},
        conjunction_reset=set(doc.get("conjunction_reset",
                                      ["but", "however", "although", "though", "yet"])),
        abbreviations={a.lower().rstrip(".") for a in doc.get("abbreviations", [])},
        defaults=defaults,
        cue_window=int(doc.get("cue_window", 6)),
    )
