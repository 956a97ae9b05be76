"""Label spaces over several dataset vocabularies.

* ``separate``: one space per dataset, used by single-dataset models.
* ``partitioned``: the vocabularies concatenated; a class name shared by two
  datasets becomes two classes (qualified as ``dataset:name``).
* ``unified``: the de-duplicated union, in first-seen order.

Names are compared after :func:`normalize`, which also applies an optional
synonym table.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MODES = ("separate", "partitioned", "unified")
BUILTIN_DATASETS = ("scannet", "arkitscenes", "s3dis", "multiscan", "3rscan", "scannetpp")

# Reference unified size reported for the six built-in vocabularies, versus
# what an exact-string union produces.  No synonym pair is assumed to close
# the gap; see label_space_report.
REFERENCE_UNIFIED_SIZE = 99


class SynonymCycleError(ValueError):
    pass


def _clean(name: str) -> str:
    if not isinstance(name, str):
        raise TypeError(f"class name must be a string, got {type(name).__name__}")
    out = re.sub(r"\s+", " ", name.strip().lower())
    if not out:
        raise ValueError("class name is empty")
    return out


class SynonymTable:
    """Mapping ``from -> to`` applied transitively; cycles are rejected."""

    def __init__(self, pairs: Iterable[tuple[str, str]] = ()):
        table: dict[str, str] = {}
        for src, dst in pairs:
            s, d = _clean(src), _clean(dst)
            if s == d:
                continue
            if s in table and table[s] != d:
                raise ValueError(f"synonym {s!r} maps to both {table[s]!r} and {d!r}")
            table[s] = d
        self._resolved = {k: self._chase(table, k) for k in table}

    @staticmethod
    def _chase(table: dict[str, str], start: str) -> str:
        seen = [start]
        cur = start
        while cur in table:
            cur = table[cur]
            if cur in seen:
                raise SynonymCycleError("synonym cycle: " + " -> ".join(seen + [cur]))
            seen.append(cur)
        return cur

    def __call__(self, name: str) -> str:
        return self._resolved.get(name, name)

    def __len__(self) -> int:
        return len(self._resolved)

    def items(self):
        return sorted(self._resolved.items())

    @classmethod
    def load(cls, path: str | Path) -> "SynonymTable":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, list):
            raise ValueError(f"{path}: synonym file must be a JSON list of {{'from', 'to'}} objects")
        pairs = []
        for i, rec in enumerate(data):
            if not isinstance(rec, dict) or set(rec) != {"from", "to"}:
                raise ValueError(f"{path}: entry {i} must have exactly the keys 'from' and 'to'")
            pairs.append((rec["from"], rec["to"]))
        return cls(pairs)


EMPTY_SYNONYMS = SynonymTable()


def normalize(name: str, synonyms: SynonymTable | Mapping[str, str] | None = None) -> str:
    """Lowercase, trim, collapse whitespace, then apply synonyms."""
    if synonyms is None:
        table = EMPTY_SYNONYMS
    elif isinstance(synonyms, SynonymTable):
        table = synonyms
    else:
        table = SynonymTable(synonyms.items())
    return table(_clean(name))


@dataclass(frozen=True)
class Vocabulary:
    dataset_id: str
    classes: tuple[str, ...]

    def __post_init__(self):
        if not self.dataset_id:
            raise ValueError("vocabulary needs a dataset_id")
        names = tuple(_clean(c) for c in self.classes)
        if not names:
            raise ValueError(f"vocabulary {self.dataset_id!r} is empty")
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ValueError(f"vocabulary {self.dataset_id!r} repeats classes {dup}")
        object.__setattr__(self, "classes", names)

    def __len__(self) -> int:
        return len(self.classes)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(rec, dict) or {"dataset_id", "classes"} - set(rec):
            raise ValueError(f"{path}: vocabulary file needs 'dataset_id' and 'classes'")
        return cls(str(rec["dataset_id"]), tuple(rec["classes"]))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"dataset_id": self.dataset_id, "classes": list(self.classes)}, indent=1) + "\n")


def builtin_vocabulary(dataset_id: str) -> Vocabulary:
    ref = resources.files("mdet3d").joinpath("data", "vocabularies", f"{dataset_id}.json")
    if not ref.is_file():
        raise KeyError(f"no built-in vocabulary {dataset_id!r}; known: {list(BUILTIN_DATASETS)}")
    rec = json.loads(ref.read_text(encoding="utf-8"))
    return Vocabulary(rec["dataset_id"], tuple(rec["classes"]))


def builtin_vocabularies() -> list[Vocabulary]:
    return [builtin_vocabulary(d) for d in BUILTIN_DATASETS]


@dataclass(frozen=True)
class LabelSpace:
    mode: str
    classes: tuple[str, ...]
    maps: dict[str, np.ndarray]  # dataset_id -> (|L_k|,) global index per local class
    vocabularies: tuple[Vocabulary, ...]
    synonyms: SynonymTable = field(default=EMPTY_SYNONYMS, compare=False)

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def datasets(self) -> tuple[str, ...]:
        return tuple(v.dataset_id for v in self.vocabularies)

    def vocabulary(self, dataset_id: str) -> Vocabulary:
        for v in self.vocabularies:
            if v.dataset_id == dataset_id:
                return v
        raise KeyError(f"dataset {dataset_id!r} is not part of this label space {list(self.datasets)}")

    def head_ranges(self) -> dict[str, tuple[int, int]]:
        """Partitioned mode: the contiguous global range owned by each dataset."""
        if self.mode != "partitioned":
            raise ValueError("head ranges exist only in partitioned mode")
        return {d: (int(m[0]), int(m[-1]) + 1) for d, m in self.maps.items()}

    def local_index(self, dataset_id: str, name: str) -> int:
        vocab = self.vocabulary(dataset_id)
        key = normalize(name, self.synonyms)
        for i, c in enumerate(vocab.classes):
            if self.synonyms(c) == key:
                return i
        raise KeyError(f"class {name!r} is not in the vocabulary of dataset {dataset_id!r}")

    def global_index(self, dataset_id: str, name: str) -> int:
        if dataset_id not in self.maps:
            raise KeyError(f"dataset {dataset_id!r} is not part of this label space {list(self.datasets)}")
        return int(self.maps[dataset_id][self.local_index(dataset_id, name)])

    def describe(self) -> dict:
        return {"mode": self.mode, "size": len(self), "datasets": list(self.datasets)}


def build(
    vocabularies: Sequence[Vocabulary],
    mode: str,
    synonyms: SynonymTable | None = None,
) -> LabelSpace | dict[str, LabelSpace]:
    """Build a label space; ``separate`` returns one space per dataset id."""
    if mode not in MODES:
        raise ValueError(f"unknown label mode {mode!r}; expected one of {MODES}")
    vocabularies = tuple(vocabularies)
    if not vocabularies:
        raise ValueError("need at least one vocabulary")
    ids = [v.dataset_id for v in vocabularies]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate dataset ids {ids}")
    syn = synonyms or EMPTY_SYNONYMS
    if mode == "separate":
        return {v.dataset_id: build([v], "unified", syn) for v in vocabularies}
    maps: dict[str, np.ndarray] = {}
    classes: list[str] = []
    if mode == "partitioned":
        for v in vocabularies:
            start = len(classes)
            classes.extend(f"{v.dataset_id}:{c}" for c in v.classes)
            maps[v.dataset_id] = np.arange(start, len(classes))
    else:
        index: dict[str, int] = {}
        for v in vocabularies:
            local = []
            for c in v.classes:
                key = syn(c)
                if key not in index:
                    index[key] = len(classes)
                    classes.append(key)
                local.append(index[key])
            maps[v.dataset_id] = np.array(local, dtype=np.int64)
    for m in maps.values():
        m.setflags(write=False)
    return LabelSpace(mode, tuple(classes), maps, vocabularies, syn)


def project_gt(scene, ls: LabelSpace) -> np.ndarray:
    """Global class index of every gt box in ``scene``."""
    if scene.dataset_id not in ls.maps:
        raise KeyError(f"scene dataset {scene.dataset_id!r} is not in label space {list(ls.datasets)}")
    return np.array([ls.global_index(scene.dataset_id, c) for c in scene.classes], dtype=np.int64)


def label_space_report(vocabularies: Sequence[Vocabulary] | None = None, synonyms: SynonymTable | None = None) -> dict:
    """Partitioned and unified sizes, with the reference-count discrepancy
    spelled out when the built-in vocabularies are used."""
    vocabs = list(vocabularies) if vocabularies is not None else builtin_vocabularies()
    part = build(vocabs, "partitioned", synonyms)
    uni = build(vocabs, "unified", synonyms)
    report = {
        "datasets": [v.dataset_id for v in vocabs],
        "sizes": {v.dataset_id: len(v) for v in vocabs},
        "partitioned": len(part),
        "unified": len(uni),
        "synonyms": len(synonyms) if synonyms else 0,
    }
    if vocabularies is None and not synonyms:
        report["note"] = (
            f"exact-string union of the built-in vocabularies gives {len(uni)} classes, "
            f"one fewer than the reference count of {REFERENCE_UNIFIED_SIZE}; the merge rule "
            "behind the reference count is not recoverable, so no synonym is assumed"
        )
    return report
