"""Dictionary-driven rule-based extraction of findings, context, laterality
and anatomical locations from chest report text.

Pipeline per sentence: mention lookup (longest match wins), context
classification from cue phrases in a pre-window, laterality/location cue
search, default-location fill for positive findings with no stated
location, then roll-up of child findings to their parents.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, asdict

from .lexicon import Lexicon, LexiconError, normalize_term

POSITIVE = "Positive"
NEGATIVE = "Negative"
HYPOTHETICAL = "Hypothetical"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class ParserError(ValueError):
    pass


@dataclass(frozen=True)
class Sentence:
    text: str
    start: int
    end: int
    index: int


@dataclass(frozen=True)
class FindingRecord:
    child_finding: str
    parent_finding: str
    context: str
    laterality: str
    locations: tuple[str, ...]
    location_source: str
    sentence_index: int
    span: tuple[int, int]


@dataclass(frozen=True)
class ParentRecord:
    parent_finding: str
    context: str
    laterality: str
    locations: tuple[str, ...]


@dataclass
class ReportParse:
    report_id: str
    sentences: list[Sentence]
    records: list[FindingRecord]
    parents: list[ParentRecord]

    def to_dict(self) -> dict:
        return {
            "report_id": self.report_id,
            "sentences": [{"text": s.text, "span": [s.start, s.end]} for s in self.sentences],
            "records": [
                {**asdict(r), "locations": list(r.locations), "span": list(r.span)}
                for r in self.records
            ],
            "parents": [
                {**asdict(p), "locations": list(p.locations)} for p in self.parents
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def split_sentences(text: str, lexicon: Lexicon | None = None) -> list[Sentence]:
    """Period/newline segmentation, skipping known abbreviations and
    decimal points. Sentence spans cover all non-whitespace text."""
    abbrevs = lexicon.abbreviations if lexicon else set()
    boundaries = [len(text)]
    for m in re.finditer(r"[.\n]", text):
        i = m.start()
        if text[i] == ".":
            if i > 0 and i + 1 < len(text) and text[i - 1].isdigit() and text[i + 1].isdigit():
                continue  # decimal point
            before = re.search(r"([A-Za-z]+)\.$", text[: i + 1])
            if before and before.group(1).lower() in abbrevs:
                continue
        boundaries.append(i + 1)
    boundaries = sorted(set(boundaries))

    sentences = []
    prev = 0
    for b in boundaries:
        chunk = text[prev:b]
        lead = len(chunk) - len(chunk.lstrip())
        trail = len(chunk.rstrip())
        if chunk.strip():
            sentences.append(Sentence(text=chunk[lead:trail], start=prev + lead,
                                      end=prev + trail, index=len(sentences)))
        prev = b
    return sentences


def _tokens_with_spans(sentence: Sentence) -> list[tuple[str, int, int]]:
    return [(m.group(0), sentence.start + m.start(), sentence.start + m.end())
            for m in _TOKEN_RE.finditer(sentence.text.lower())]


def _phrase_matches(tokens: list[str], table) -> list[tuple[int, int, object]]:
    """All (start, end, value) token-phrase matches of table keys."""
    if not table:
        return []
    max_len = max(len(k) for k in table)
    out = []
    for i in range(len(tokens)):
        for L in range(min(max_len, len(tokens) - i), 0, -1):
            key = tuple(tokens[i:i + L])
            if key in table:
                out.append((i, i + L, table[key] if isinstance(table, dict) else key))
    return out


def find_mentions(sentence: Sentence, lexicon: Lexicon) -> list[tuple[str, tuple[int, int], int]]:
    """Finding mentions as (child, char span, start token index); overlaps
    resolved longest-first, then leftmost."""
    toks = _tokens_with_spans(sentence)
    words = [t[0] for t in toks]
    candidates = _phrase_matches(words, lexicon.finding_variants)
    candidates.sort(key=lambda c: (-(c[1] - c[0]), c[0]))
    taken = [False] * len(words)
    chosen = []
    for start, end, child in candidates:
        if any(taken[start:end]):
            continue
        for k in range(start, end):
            taken[k] = True
        chosen.append((start, end, child))
    chosen.sort(key=lambda c: c[0])
    return [(child, (toks[s][1], toks[e - 1][2]), s) for s, e, child in chosen]


def classify_context(sentence: Sentence, mention_start_tok: int, lexicon: Lexicon) -> str:
    """Cue in a pre-window of `cue_window` tokens governs the mention unless
    a conjunction-reset word intervenes; Negative beats Hypothetical."""
    words = [t[0] for t in _tokens_with_spans(sentence)]
    window = lexicon.cue_window

    def governed_by(cues) -> bool:
        for start, end, _ in _phrase_matches(words, {c: c for c in cues}):
            if end <= mention_start_tok and mention_start_tok - end <= window:
                between = words[end:mention_start_tok]
                if not any(w in lexicon.conjunction_reset for w in between):
                    return True
        return False

    if governed_by(lexicon.negation_cues):
        return NEGATIVE
    if governed_by(lexicon.hypothetical_cues):
        return HYPOTHETICAL
    return POSITIVE


def extract_location(sentence: Sentence, lexicon: Lexicon) -> tuple[str, frozenset, bool]:
    """Laterality and location labels from all cues in the sentence.

    Returns (laterality, labels, explicit); explicit=False flags that the
    default-location rules are needed. Sided labels inconsistent with a
    single-sided laterality are dropped.
    """
    words = [t[0] for t in _tokens_with_spans(sentence)]
    lats = {v for _, _, v in _phrase_matches(words, lexicon.laterality_variants)}
    labels = {v for _, _, v in _phrase_matches(words, lexicon.location_variants)}
    for _, _, (lat, locs) in _phrase_matches(words, lexicon.combined_cues):
        lats.add(lat)
        labels.update(locs)

    if "bilateral" in lats or {"left", "right"} <= lats:
        laterality = "Bilateral"
    elif "left" in lats:
        laterality = "Left"
    elif "right" in lats:
        laterality = "Right"
    else:
        laterality = "Unspecified"

    if laterality == "Left":
        labels = {lb for lb in labels if not lb.startswith("right ")}
    elif laterality == "Right":
        labels = {lb for lb in labels if not lb.startswith("left ")}

    return laterality, frozenset(labels), bool(labels)


def apply_default_locations(child: str, laterality: str, lexicon: Lexicon) -> frozenset:
    rules = lexicon.defaults.get(child)
    if rules is None:
        raise ParserError(f"no default-location rule for finding '{child}'")
    key = laterality.lower()
    if key not in rules:
        key = "unspecified"
    if key not in rules:
        raise ParserError(f"no default-location rule for finding '{child}' laterality {laterality}")
    return rules[key]


def parse_report(text: str, lexicon: Lexicon, report_id: str = "") -> ReportParse:
    sentences = split_sentences(text, lexicon)
    records: list[FindingRecord] = []
    for sent in sentences:
        for child, span, start_tok in find_mentions(sent, lexicon):
            context = classify_context(sent, start_tok, lexicon)
            laterality, locations, explicit = "Unspecified", frozenset(), True
            source = "Explicit"
            if context == POSITIVE:
                laterality, locations, explicit = extract_location(sent, lexicon)
                if not explicit:
                    locations = apply_default_locations(child, laterality, lexicon)
                    source = "Default"
            records.append(FindingRecord(
                child_finding=child,
                parent_finding=lexicon.parent_of[child],
                context=context,
                laterality=laterality,
                locations=tuple(sorted(locations)),
                location_source=source,
                sentence_index=sent.index,
                span=span,
            ))

    parents = _roll_up(records)
    return ReportParse(report_id=report_id, sentences=sentences,
                       records=records, parents=parents)


def _roll_up(records: list[FindingRecord]) -> list[ParentRecord]:
    by_parent: dict[str, list[FindingRecord]] = {}
    for r in records:
        by_parent.setdefault(r.parent_finding, []).append(r)

    out = []
    for parent in sorted(by_parent):
        children = by_parent[parent]
        positive = [r for r in children if r.context == POSITIVE]
        if positive:
            context = POSITIVE
            lats = {r.laterality for r in positive}
            if "Bilateral" in lats or {"Left", "Right"} <= lats:
                laterality = "Bilateral"
            elif "Left" in lats:
                laterality = "Left"
            elif "Right" in lats:
                laterality = "Right"
            else:
                laterality = "Unspecified"
            locations = sorted(set().union(*(r.locations for r in positive)))
        else:
            context = NEGATIVE if any(r.context == NEGATIVE for r in children) else HYPOTHETICAL
            laterality = "Unspecified"
            locations = []
        out.append(ParentRecord(parent_finding=parent, context=context,
                                laterality=laterality, locations=tuple(locations)))
    return out


def parse_reports_jsonl(lines, lexicon: Lexicon):
    """Parse {id, text} JSONL records; yields ReportParse."""
    for line in lines:
        line = line.strip()
        if not line:
            continue
        doc = json.loads(line)
        yield parse_report(doc["text"], lexicon, report_id=str(doc.get("id", "")))
