from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

GEOMETRIC = "geometric"
ACTION = "action"

N_ENTITY_CATEGORIES = 141
N_GEOMETRIC_RELATIONS = 14
N_ACTION_RELATIONS = 9
N_PARTS = 25


class SchemaError(ValueError):
    pass


def _check_names(kind: str, names: tuple[str, ...]):
    if not names:
        raise SchemaError(f"{kind} list is empty")
    if any(not n for n in names):
        raise SchemaError(f"{kind} contains an empty name")
    if len(set(names)) != len(names):
        raise SchemaError(f"{kind} contains duplicate names")


@dataclass(frozen=True)
class CategorySchema:
    """Entity, relation and body-part vocabularies.

    The default mirrors the PIC label space sizes: 141 entity categories with
    ``human`` first, 14 geometric plus 9 action relations, and 25 parts.
    Names other than ``human`` are placeholders.
    """

    entity_names: tuple[str, ...]
    relation_names: tuple[str, ...]
    relation_kinds: tuple[str, ...]
    part_names: tuple[str, ...]
    human_category_index: int = 0

    def __post_init__(self):
        for name in ("entity_names", "relation_names", "relation_kinds", "part_names"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        _check_names("entity_names", self.entity_names)
        _check_names("relation_names", self.relation_names)
        _check_names("part_names", self.part_names)
        if len(self.relation_kinds) != len(self.relation_names):
            raise SchemaError("every relation needs exactly one kind")
        bad = {k for k in self.relation_kinds if k not in (GEOMETRIC, ACTION)}
        if bad:
            raise SchemaError(f"unknown relation kinds: {sorted(bad)}")
        if not 0 <= self.human_category_index < len(self.entity_names):
            raise SchemaError("human_category_index out of range")

    @classmethod
    def default(cls) -> "CategorySchema":
        entities = ["human"] + [f"entity_{i:03d}" for i in range(1, N_ENTITY_CATEGORIES)]
        relations = [f"geo_{i:02d}" for i in range(N_GEOMETRIC_RELATIONS)]
        relations += [f"act_{i:02d}" for i in range(N_ACTION_RELATIONS)]
        kinds = [GEOMETRIC] * N_GEOMETRIC_RELATIONS + [ACTION] * N_ACTION_RELATIONS
        parts = [f"part_{i:02d}" for i in range(N_PARTS)]
        return cls(tuple(entities), tuple(relations), tuple(kinds), tuple(parts), 0)

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    @property
    def n_parts(self) -> int:
        return len(self.part_names)

    def is_action(self, relation: int) -> bool:
        return self.relation_kinds[relation] == ACTION

    def to_dict(self) -> dict:
        return {
            "entity_names": list(self.entity_names),
            "relation_names": list(self.relation_names),
            "relation_kinds": list(self.relation_kinds),
            "part_names": list(self.part_names),
            "human_category_index": self.human_category_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CategorySchema":
        try:
            return cls(
                tuple(d["entity_names"]),
                tuple(d["relation_names"]),
                tuple(d["relation_kinds"]),
                tuple(d["part_names"]),
                int(d.get("human_category_index", 0)),
            )
        except KeyError as e:
            raise SchemaError(f"schema missing field {e}") from None

    @classmethod
    def load(cls, path: str | Path) -> "CategorySchema":
        return cls.from_dict(json.loads(Path(path).read_text()))
