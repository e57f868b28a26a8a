"""Shared object vocabulary: class catalog, semantic category lexicon and
tokenization helpers.

The catalog is the simulator's ontology; both the scenario generators and the
heuristic reasoner draw from it so that generated labels and agent-side
reasoning stay consistent.
"""

from __future__ import annotations

import re

# class -> (half extents in meters, movable)
OBJECT_CATALOG: dict[str, tuple[tuple[float, float, float], bool]] = {
    "mug": ((0.040, 0.040, 0.050), True),
    "cup": ((0.035, 0.035, 0.045), True),
    "book": ((0.090, 0.065, 0.015), True),
    "box": ((0.060, 0.045, 0.055), True),
    "bottle": ((0.030, 0.030, 0.100), True),
    "can": ((0.030, 0.030, 0.060), True),
    "bowl": ((0.070, 0.070, 0.035), True),
    "stapler": ((0.055, 0.020, 0.025), True),
    "lotion": ((0.030, 0.030, 0.080), True),
    "plate": ((0.090, 0.090, 0.012), True),
    "marker": ((0.060, 0.010, 0.010), True),
    "tape": ((0.040, 0.040, 0.020), True),
    "table": ((0.600, 0.400, 0.200), False),
    "cabinet": ((0.130, 0.110, 0.120), False),
    "drawer": ((0.150, 0.110, 0.070), False),
}

STATIC_CLASSES = {name for name, (_, mov) in OBJECT_CATALOG.items() if not mov}
CONTAINER_CLASSES = {"cabinet", "drawer"}

# part -> classes the part may belong to (drives the Belong relation)
PART_WHOLE: dict[str, set[str]] = {
    "handle": {"cabinet", "drawer"},
    "knob": {"cabinet", "drawer"},
    "lid": {"box", "bowl", "bottle"},
}

# semantic zone label -> item classes people file under it
CATEGORY_LEXICON: dict[str, set[str]] = {
    "snacks": {"oreos", "chips", "cookies", "crackers", "candy"},
    "drinks": {"cola", "soda", "juice", "water", "coffee"},
    "stationery": {"marker", "stapler", "tape", "pen", "pencil"},
    "kitchenware": {"mug", "cup", "bowl", "plate"},
    "toiletries": {"lotion", "soap", "cream", "sunscreen"},
}

STOPWORDS = {
    "a", "an", "the", "find", "get", "me", "bring", "retrieve", "fetch",
    "grab", "pick", "up", "i", "want", "need", "please", "put", "place",
    "locate", "to", "my", "give", "some", "of",
}

_token_re = re.compile(r"[a-z0-9&]+")


def tokens(text: str) -> set[str]:
    """Lowercased word tokens, singular/plural folded naively."""
    out = set()
    for tok in _token_re.findall(text.lower().replace("_", " ")):
        out.add(tok)
        if tok.endswith("s") and len(tok) > 3:
            out.add(tok[:-1])
    return out


def content_tokens(text: str) -> set[str]:
    return {t for t in tokens(text) if t not in STOPWORDS}


def category_of(word: str) -> str | None:
    """Semantic zone a word files under, if any."""
    w = word.lower()
    for cat, members in CATEGORY_LEXICON.items():
        if w in members or (w.endswith("s") and w[:-1] in members):
            return cat
    return None


def semantic_overlap(tag_text: str, instruction: str) -> int:
    """Crude relevance score between a zone label and an instruction."""
    tag_toks = tokens(tag_text)
    instr_toks = content_tokens(instruction)
    score = len(tag_toks & instr_toks)
    for tok in instr_toks:
        cat = category_of(tok)
        if cat is not None and (cat in tag_toks or (cat + "s") in tag_toks):
            score += 2
    return score


def is_movable(class_label: str) -> bool:
    if class_label in OBJECT_CATALOG:
        return OBJECT_CATALOG[class_label][1]
    return class_label not in STATIC_CLASSES
