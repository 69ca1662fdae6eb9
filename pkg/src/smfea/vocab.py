"""Word vocabulary and fragment/relation category dictionaries."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .corpus import Dataset
from .errors import ConfigurationError, InputError
from .referral import NULL_LABEL

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

WORD_VOCAB_FILE = "word_vocab.json"
FRAGMENT_DICT_FILE = "fragment_dict.json"
RELATION_DICT_FILE = "relation_dict.json"


def _ranked(counts: Counter) -> list[str]:
    # descending frequency, ties broken lexicographically
    return sorted(counts, key=lambda token: (-counts[token], token))


class WordVocab:
    """Token <-> id map with PAD=0 and UNK=1 reserved."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = [PAD_TOKEN, UNK_TOKEN] + list(tokens)
        self.token_to_id = {token: i for i, token in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise InputError("duplicate tokens in vocabulary")

    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: list[str]) -> list[int]:
        if not tokens:
            raise InputError("cannot encode an empty sentence")
        return [self.token_to_id.get(token, UNK_ID) for token in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.token_to_id, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "WordVocab":
        mapping = json.loads(Path(path).read_text(encoding="utf-8"))
        ordered = sorted(mapping, key=mapping.get)
        if ordered[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise InputError(f"{path}: ids 0/1 must be the PAD/UNK specials")
        return cls(ordered[2:])


def build_word_vocab(dataset: Dataset, min_count: int = 1) -> WordVocab:
    """Vocabulary over all tokens occurring at least min_count times."""
    if not dataset:
        raise ConfigurationError("cannot build a vocabulary from an empty dataset")
    counts = Counter(token for sample in dataset for token in sample.tokens)
    kept = Counter({token: n for token, n in counts.items() if n >= min_count})
    return WordVocab(_ranked(kept))


def encode_tokens(tokens: list[str], vocab: WordVocab) -> list[int]:
    """Integer-encode a sentence; unknown tokens map to UNK."""
    return vocab.encode(tokens)


def _label_map(counts: Counter) -> dict[str, int]:
    counts.pop(NULL_LABEL, None)
    return {NULL_LABEL: 0, **{label: i for i, label in enumerate(_ranked(counts), start=1)}}


@dataclass
class CategoryDicts:
    """Fragment and relation label -> id maps, both reserving Null at id 0."""

    fragment: dict[str, int]
    relation: dict[str, int]

    def __post_init__(self):
        for name, mapping in (("fragment", self.fragment), ("relation", self.relation)):
            if mapping.get(NULL_LABEL) != 0:
                raise InputError(f"{name} dictionary must map {NULL_LABEL!r} to 0")
            if len(set(mapping.values())) != len(mapping):
                raise InputError(f"{name} dictionary ids are not unique")
        self.fragment_labels = [None] * len(self.fragment)
        for label, i in self.fragment.items():
            self.fragment_labels[i] = label
        self.relation_labels = [None] * len(self.relation)
        for label, i in self.relation.items():
            self.relation_labels[i] = label

    @property
    def n_fragment(self) -> int:
        return len(self.fragment)

    @property
    def n_relation(self) -> int:
        return len(self.relation)

    def encode_tree(self, tree) -> tuple[list[int], list[int]]:
        """Targets for the four leaves and the three relation nodes (index order)."""
        try:
            leaves = [self.fragment[label] for label in tree.leaf_labels]
            relations = [self.relation[label] for label in tree.relation_labels]
        except KeyError as exc:
            raise InputError(f"tree label {exc} not in category dictionary") from exc
        return leaves, relations

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        (out_dir / FRAGMENT_DICT_FILE).write_text(
            json.dumps(self.fragment, indent=1), encoding="utf-8"
        )
        (out_dir / RELATION_DICT_FILE).write_text(
            json.dumps(self.relation, indent=1), encoding="utf-8"
        )

    @classmethod
    def load(cls, out_dir: str | Path) -> "CategoryDicts":
        out_dir = Path(out_dir)
        return cls(
            fragment=json.loads((out_dir / FRAGMENT_DICT_FILE).read_text(encoding="utf-8")),
            relation=json.loads((out_dir / RELATION_DICT_FILE).read_text(encoding="utf-8")),
        )


def build_category_dicts(dataset: Dataset) -> CategoryDicts:
    """Distinct leaf/internal labels across the corpus, plus the Null reserve."""
    fragment_counts: Counter = Counter()
    relation_counts: Counter = Counter()
    for sample in dataset:
        fragment_counts.update(sample.tree.leaf_labels)
        relation_counts.update(sample.tree.relation_labels)
    return CategoryDicts(
        fragment=_label_map(fragment_counts), relation=_label_map(relation_counts)
    )
