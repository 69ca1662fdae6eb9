"""Shared referral tree: POS tagging, sentence whitening, and the fixed 7-node builder.

The referral tree is a fixed-topology three-layer binary tree with seven nodes,
numbered so that an in-order traversal visits 1..7: leaves {1,3,5,7} carry
fragment labels, internal nodes {2,6} and the root {4} carry relation labels.
One tree is built per sentence and supervises both modality encoders.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Protocol

from .errors import InputError

if TYPE_CHECKING:
    from .vocab import CategoryDicts

NOUN = "NOUN"
VERB = "VERB"
ADP = "ADP"
CONJ = "CONJ"
ADJ = "ADJ"
OTHER = "OTHER"

COARSE_TAGS = frozenset({NOUN, VERB, ADP, CONJ, ADJ, OTHER})
RELATION_TAGS = frozenset({VERB, ADP, CONJ})

LEAF_NODES = (1, 3, 5, 7)
RELATION_NODES = (2, 4, 6)
ROOT_NODE = 4
CHILDREN = {2: (1, 3), 6: (5, 7), 4: (2, 6)}
NULL_LABEL = "Null"

KIND_FRAGMENT = "fragment"
KIND_RELATION = "relation"


def node_kind(index: int) -> str:
    if index in LEAF_NODES:
        return KIND_FRAGMENT
    if index in RELATION_NODES:
        return KIND_RELATION
    raise InputError(f"node index {index} outside 1..7")


@dataclass(frozen=True)
class TaggedToken:
    """A surface token with its lemma and coarse POS tag."""

    surface: str
    lemma: str
    pos: str

    def __post_init__(self):
        if not self.lemma:
            raise InputError(f"empty lemma for surface {self.surface!r}")
        if self.pos not in COARSE_TAGS:
            raise InputError(f"unknown coarse tag {self.pos!r}")


@dataclass(frozen=True)
class ReferralTree:
    """Label tree over the fixed 7-node topology, one label string per node.

    ``labels[i]`` is the label of node ``i + 1``; unfilled or unknown slots
    hold ``"Null"``.
    """

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) != 7:
            raise InputError(f"referral tree needs 7 nodes, got {len(self.labels)}")
        if any(not isinstance(lbl, str) or not lbl for lbl in self.labels):
            raise InputError("referral tree labels must be nonempty strings")

    @classmethod
    def all_null(cls) -> "ReferralTree":
        return cls(labels=(NULL_LABEL,) * 7)

    def label(self, index: int) -> str:
        node_kind(index)
        return self.labels[index - 1]

    @property
    def leaf_labels(self) -> tuple[str, ...]:
        return tuple(self.labels[i - 1] for i in LEAF_NODES)

    @property
    def relation_labels(self) -> tuple[str, ...]:
        return tuple(self.labels[i - 1] for i in RELATION_NODES)

    def in_order_labels(self, drop_null: bool = False) -> list[str]:
        labels = list(self.labels)
        if drop_null:
            labels = [lbl for lbl in labels if lbl != NULL_LABEL]
        return labels

    def to_records(self) -> list[dict]:
        return [
            {"index": i, "kind": node_kind(i), "label": self.labels[i - 1]}
            for i in range(1, 8)
        ]

    @classmethod
    def from_records(cls, records: list[dict]) -> "ReferralTree":
        if len(records) != 7:
            raise InputError(f"referral tree needs 7 nodes, got {len(records)}")
        labels = []
        for position, record in enumerate(records, start=1):
            try:
                index, kind, label = record["index"], record["kind"], record["label"]
            except (TypeError, KeyError) as exc:
                raise InputError(f"tree node {position} missing field {exc}") from exc
            if index != position:
                raise InputError(
                    f"tree nodes must appear in index order 1..7, got {index} at position {position}"
                )
            if kind != node_kind(index):
                raise InputError(f"node {index} has kind {kind!r}, expected {node_kind(index)!r}")
            labels.append(label)
        return cls(labels=tuple(labels))


class Tagger(Protocol):
    """Anything that maps surface tokens to tagged lemmas."""

    def tag(self, tokens: Iterable[str]) -> list[TaggedToken]: ...


# Word stock for the built-in tagger. The synthetic grammar draws its labels
# from the front of these tuples, so generated sentences round-trip through
# the tagger without an external tool.
FRAGMENT_WORDS = (
    "dog", "cat", "ball", "man", "woman", "boy", "girl", "bird", "horse",
    "car", "tree", "house", "park", "street", "table", "chair", "bike",
    "child", "player", "field", "grass", "water", "beach", "hat", "shirt",
    "frisbee", "kite", "guitar", "camera", "phone", "bench", "flower",
    "river", "mountain", "boat", "door", "window", "book", "cup", "fence",
)
RELATION_WORDS = (
    "play", "hold", "chase", "ride", "watch", "carry", "push", "pull",
    "kick", "throw", "catch", "wear", "eat", "drink", "read", "on", "in",
    "under", "near", "beside", "behind", "above", "below", "over", "with",
    "and", "or", "while",
)
_ADJECTIVES = (
    "red", "blue", "green", "big", "small", "young", "old", "happy", "wet",
    "dry", "tall", "short", "brown", "black", "white",
)
_VERBS_EXTRA = ("run", "jump", "walk", "climb", "sit", "stand", "sleep")
_DETERMINERS = (
    "a", "an", "the", "this", "that", "these", "those", "his", "her", "its",
    "their", "some", "every",
)
_PREPOSITION_SET = frozenset(
    {"on", "in", "under", "near", "beside", "behind", "above", "below", "over",
     "with", "at", "by", "into", "onto", "across"}
)
_CONJUNCTION_SET = frozenset({"and", "or", "while", "but", "as"})


def _relation_tag(word: str) -> str:
    if word in _PREPOSITION_SET:
        return ADP
    if word in _CONJUNCTION_SET:
        return CONJ
    return VERB


def default_lexicon() -> dict[str, tuple[str, str]]:
    """Surface -> (lemma, tag) map covering the synthetic grammar and stock words."""
    lexicon: dict[str, tuple[str, str]] = {}
    for word in FRAGMENT_WORDS:
        lexicon[word] = (word, NOUN)
    for word in RELATION_WORDS + _VERBS_EXTRA:
        lexicon.setdefault(word, (word, _relation_tag(word)))
    for word in _ADJECTIVES:
        lexicon.setdefault(word, (word, ADJ))
    for word in _DETERMINERS:
        lexicon[word] = (word, OTHER)
    for mark in (".", ",", "!", "?", ";", ":"):
        lexicon[mark] = (mark, OTHER)
    return lexicon


# Overflow labels emitted by the synthetic generator once the word stock runs out.
_SYNTH_FRAGMENT_RE = re.compile(r"entity\d+$")
_SYNTH_RELATION_RE = re.compile(r"rel\d+$")


class LexiconTagger:
    """Rule/lexicon tagger: exact lookup, light suffix stripping, grammar patterns.

    Unknown words tag as OTHER and are dropped by whitening. External taggers
    plug in by exporting their output as a JSON lexicon (``from_json``).
    """

    def __init__(self, lexicon: dict[str, tuple[str, str]] | None = None):
        self.lexicon = dict(default_lexicon() if lexicon is None else lexicon)

    @classmethod
    def from_json(cls, path: str | Path) -> "LexiconTagger":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        lexicon = {}
        for surface, entry in raw.items():
            lemma, pos = entry
            if pos not in COARSE_TAGS:
                raise InputError(f"lexicon entry {surface!r} has unknown tag {pos!r}")
            lexicon[surface] = (lemma, pos)
        return cls(lexicon)

    def _lookup(self, word: str) -> tuple[str, str]:
        entry = self.lexicon.get(word)
        if entry is not None:
            return entry
        # suffix stripping: plays -> play, dogs -> dog, boxes -> box
        for suffix, replacements in (("s", ("",)), ("es", ("",)), ("ing", ("", "e")), ("ed", ("", "e"))):
            if word.endswith(suffix) and len(word) > len(suffix) + 1:
                for tail in replacements:
                    stem = word[: len(word) - len(suffix)] + tail
                    entry = self.lexicon.get(stem)
                    if entry is not None:
                        return entry
        if _SYNTH_FRAGMENT_RE.fullmatch(word):
            return (word, NOUN)
        if _SYNTH_RELATION_RE.fullmatch(word):
            return (word, VERB)
        return (word, OTHER)

    def tag(self, tokens: Iterable[str]) -> list[TaggedToken]:
        tagged = []
        for token in tokens:
            lemma, pos = self._lookup(token.lower())
            tagged.append(TaggedToken(surface=token, lemma=lemma, pos=pos))
        return tagged


def whiten_sentence(tokens: Iterable[str], tagger: Tagger) -> list[TaggedToken]:
    """Tag and lemmatize, dropping everything tagged OTHER.

    May return an empty list; callers decide how to handle all-noise sentences.
    """
    return [token for token in tagger.tag(tokens) if token.pos != OTHER]


def fragment_inventory(n: int) -> list[str]:
    """First n fragment labels of the synthetic grammar, in canonical order."""
    stock = list(FRAGMENT_WORDS[:n])
    stock += [f"entity{i}" for i in range(len(stock), n)]
    return stock


def relation_inventory(n: int) -> list[str]:
    """First n relation labels of the synthetic grammar, in canonical order."""
    stock = list(RELATION_WORDS[:n])
    stock += [f"rel{i}" for i in range(len(stock), n)]
    return stock


def _leaf_label(
    tagged: list[TaggedToken], position: int, dicts: "CategoryDicts | None"
) -> str:
    noun = tagged[position].lemma
    # an adjective directly before the noun may form a pair label, but only
    # if the pair is a known fragment category
    if position > 0 and tagged[position - 1].pos == ADJ and dicts is not None:
        pair = f"{tagged[position - 1].lemma} {noun}"
        if pair in dicts.fragment:
            return pair
    return noun


def build_referral_tree(
    tagged: list[TaggedToken], dicts: "CategoryDicts | None" = None
) -> ReferralTree:
    """Fill the fixed 7-node topology from a whitened sentence.

    Leaves 1,3,5,7 take the first four nouns in order. Each relation node
    takes the first verb/preposition/conjunction strictly between its two
    flanking leaves' positions. Unfilled slots, and labels missing from the
    given dictionaries, become "Null". Passing ``dicts=None`` keeps every
    label as-is (used when bootstrapping dictionaries from a fresh corpus).
    """
    noun_positions = [i for i, token in enumerate(tagged) if token.pos == NOUN][:4]
    labels = {i: NULL_LABEL for i in range(1, 8)}

    for node, position in zip(LEAF_NODES, noun_positions):
        labels[node] = _leaf_label(tagged, position, dicts)

    # relation windows lie strictly between consecutive chosen leaves
    windows = {2: (0, 1), 4: (1, 2), 6: (2, 3)}
    for node, (left, right) in windows.items():
        if right >= len(noun_positions):
            continue
        lo, hi = noun_positions[left], noun_positions[right]
        for i in range(lo + 1, hi):
            if tagged[i].pos in RELATION_TAGS:
                labels[node] = tagged[i].lemma
                break

    if dicts is not None:
        for node in LEAF_NODES:
            if labels[node] not in dicts.fragment:
                labels[node] = NULL_LABEL
        for node in RELATION_NODES:
            if labels[node] not in dicts.relation:
                labels[node] = NULL_LABEL

    return ReferralTree(labels=tuple(labels[i] for i in range(1, 8)))
