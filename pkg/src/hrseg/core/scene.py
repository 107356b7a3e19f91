"""Scene-level annotations and their JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masks import Mask, rle_encode
from .schema import CategorySchema


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class EntityAnnotation:
    id: int
    category: int
    mask: Mask


@dataclass(frozen=True)
class RelationAnnotation:
    subject_id: int
    object_id: int
    relation: int
    # sorted part indices; the multi-hot view is parts_multihot()
    parts: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(sorted(int(p) for p in self.parts)))

    def parts_multihot(self, n_parts: int) -> np.ndarray:
        v = np.zeros(n_parts, dtype=np.float32)
        v[list(self.parts)] = 1.0
        return v


@dataclass(frozen=True)
class SceneAnnotation:
    image_width: int
    image_height: int
    entities: tuple[EntityAnnotation, ...]
    relations: tuple[RelationAnnotation, ...] = ()
    parsing: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "relations", tuple(self.relations))
        if self.parsing is not None:
            parsing = np.array(self.parsing, dtype=np.int32)
            parsing.setflags(write=False)
            object.__setattr__(self, "parsing", parsing)

    def entity(self, entity_id: int) -> EntityAnnotation:
        for e in self.entities:
            if e.id == entity_id:
                return e
        raise SceneError(f"unknown entity id {entity_id}")

    def validate(self, schema: CategorySchema) -> None:
        """Raise SceneError on the first violated scene invariant."""
        dims = (self.image_width, self.image_height)
        ids = {}
        for e in self.entities:
            if e.id in ids:
                raise SceneError(f"duplicate entity id {e.id}")
            ids[e.id] = e
            if not 0 <= e.category < schema.n_entities:
                raise SceneError(f"entity {e.id}: category {e.category} out of range")
            if (e.mask.width, e.mask.height) != dims:
                raise SceneError(
                    f"entity {e.id}: mask is {e.mask.width}x{e.mask.height}, "
                    f"image is {dims[0]}x{dims[1]}"
                )
            if e.mask.empty:
                raise SceneError(f"entity {e.id}: empty mask")
        for r in self.relations:
            if r.subject_id not in ids or r.object_id not in ids:
                raise SceneError(f"relation {r} references an unknown entity")
            if r.subject_id == r.object_id:
                raise SceneError(f"relation {r}: subject and object coincide")
            if ids[r.subject_id].category != schema.human_category_index:
                raise SceneError(f"relation {r}: subject is not human")
            if not 0 <= r.relation < schema.n_relations:
                raise SceneError(f"relation {r}: class out of range")
            if any(not 0 <= p < schema.n_parts for p in r.parts):
                raise SceneError(f"relation {r}: part index out of range")
            if len(set(r.parts)) != len(r.parts):
                raise SceneError(f"relation {r}: repeated part")
            if schema.is_action(r.relation) != bool(r.parts):
                raise SceneError(f"relation {r}: parts must be set iff the relation is an action")
        if self.parsing is not None:
            if self.parsing.shape != (self.image_height, self.image_width):
                raise SceneError(f"parsing map is {self.parsing.shape}, image is {dims}")
            if self.parsing.min() < 0 or self.parsing.max() > schema.n_parts:
                raise SceneError("parsing labels outside 0..C_part")

    def to_dict(self) -> dict:
        d = {
            "width": self.image_width,
            "height": self.image_height,
            "entities": [
                {"id": e.id, "category": e.category, "rle": list(e.mask.runs)}
                for e in self.entities
            ],
            "relations": [
                {"subject": r.subject_id, "object": r.object_id,
                 "relation": r.relation, "parts": list(r.parts)}
                for r in self.relations
            ],
        }
        if self.parsing is not None:
            d["parsing_rle_per_label"] = {
                str(label): list(rle_encode(self.parsing == label, self.image_width,
                                            self.image_height).runs)
                for label in np.unique(self.parsing) if label != 0
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneAnnotation":
        try:
            w, h = int(d["width"]), int(d["height"])
            entities = tuple(
                EntityAnnotation(int(e["id"]), int(e["category"]), Mask(w, h, tuple(e["rle"])))
                for e in d["entities"]
            )
            relations = tuple(
                RelationAnnotation(int(r["subject"]), int(r["object"]), int(r["relation"]),
                                   tuple(r.get("parts", ())))
                for r in d.get("relations", ())
            )
            parsing = None
            if d.get("parsing_rle_per_label") is not None:
                parsing = np.zeros((h, w), dtype=np.int32)
                for label, runs in d["parsing_rle_per_label"].items():
                    parsing[Mask(w, h, tuple(runs)).to_bitmap()] = int(label)
        except (KeyError, TypeError) as e:
            raise SceneError(f"malformed scene JSON: {e!r}") from None
        except ValueError as e:
            raise SceneError(f"malformed scene JSON: {e}") from None
        return cls(w, h, entities, relations, parsing)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def load(cls, path: str | Path) -> "SceneAnnotation":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())
