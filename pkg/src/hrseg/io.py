"""On-disk formats: bundle directories, scene collections and prediction JSON."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import Mask, SceneAnnotation, read_hrst, upsample_mask, write_hrst
from .decoder import EntityPrediction, PredictionBundle, RelationTriplet
from .encoder import TargetBundle

SCENE_SUFFIX = ".scene.json"
RECORDS_FILE = "records.json"
TARGET_FILES = {"Y": "y.hrst", "P": "p.hrst", "parsing": "parsing.hrst"}


def scene_name(path: Path) -> str:
    name = path.name
    return name[:-len(SCENE_SUFFIX)] if name.endswith(SCENE_SUFFIX) else path.stem


def find_scenes(path: str | Path) -> list[Path]:
    """Scene files under ``path`` (a directory or a single file), sorted by name."""
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"no such scene file or directory: {path}")
    return sorted(path.glob(f"*{SCENE_SUFFIX}"))


def load_scenes(path: str | Path) -> dict[str, SceneAnnotation]:
    """Load scenes keyed by name.

    A JSON file holding a list (or a ``{"scenes": {name: scene}}`` map) is
    also accepted so a whole split can live in one file.
    """
    path = Path(path)
    if path.is_file() and not path.name.endswith(SCENE_SUFFIX):
        data = json.loads(path.read_text())
        if isinstance(data, list):
            return {f"scene_{i:05d}": SceneAnnotation.from_dict(d) for i, d in enumerate(data)}
        if "scenes" in data:
            return {k: SceneAnnotation.from_dict(v) for k, v in sorted(data["scenes"].items())}
        return {scene_name(path): SceneAnnotation.from_dict(data)}
    return {scene_name(p): SceneAnnotation.load(p) for p in find_scenes(path)}


def write_targets(directory: Path, bundle: TargetBundle) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_hrst(directory / TARGET_FILES["Y"], bundle.Y)
    write_hrst(directory / TARGET_FILES["P"], bundle.P)
    write_hrst(directory / TARGET_FILES["parsing"], bundle.parsing)
    (directory / RECORDS_FILE).write_text(json.dumps(bundle.records_dict(), indent=1))


def write_prediction_bundle(directory: Path, bundle: PredictionBundle) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for attr, fname in PredictionBundle.TENSOR_FILES.items():
        write_hrst(directory / fname, getattr(bundle, attr))


def read_prediction_bundle(directory: Path) -> PredictionBundle:
    arrays = {}
    for attr, fname in PredictionBundle.TENSOR_FILES.items():
        f = directory / fname
        if not f.exists():
            raise FileNotFoundError(f"{directory}: missing {fname}")
        arrays[attr] = read_hrst(f)
    return PredictionBundle(**arrays)


def is_bundle_dir(path: Path) -> bool:
    return (path / PredictionBundle.TENSOR_FILES["Y"]).exists()


def find_bundles(path: str | Path) -> list[Path]:
    """A bundle directory itself, or its bundle subdirectories sorted by name."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"no such bundle directory: {path}")
    if is_bundle_dir(path):
        return [path]
    return sorted(p for p in path.iterdir() if p.is_dir() and is_bundle_dir(p))


def read_records(directory: Path) -> dict | None:
    f = directory / RECORDS_FILE
    return json.loads(f.read_text()) if f.exists() else None


# -- predictions -----------------------------------------------------------------

def _entity_to_dict(e: EntityPrediction) -> dict:
    return {"category": e.category, "center": list(e.center), "score": e.score,
            "rle": list(e.mask.runs)}


def _entity_from_dict(d: dict, width: int, height: int) -> EntityPrediction:
    return EntityPrediction(int(d["category"]), tuple(d["center"]),
                            Mask(width, height, tuple(d["rle"])), float(d["score"]))


def triplet_to_dict(t: RelationTriplet) -> dict:
    return {
        "relation": t.relation,
        "score": t.score,
        "relation_point": list(t.relation_point),
        "relation_score": t.relation_score,
        "subject": _entity_to_dict(t.subject),
        "object": _entity_to_dict(t.object),
        "parts": list(t.parts),
        "part_rles": {str(p): (list(m.runs) if m is not None else None)
                      for p, m in sorted(t.part_masks.items())},
    }


def triplet_from_dict(d: dict, width: int, height: int) -> RelationTriplet:
    part_masks = {int(p): (Mask(width, height, tuple(r)) if r is not None else None)
                  for p, r in d.get("part_rles", {}).items()}
    return RelationTriplet(
        relation=int(d["relation"]),
        score=float(d["score"]),
        subject=_entity_from_dict(d["subject"], width, height),
        object=_entity_from_dict(d["object"], width, height),
        relation_point=tuple(d.get("relation_point", (0, 0))),
        relation_score=float(d.get("relation_score", 1.0)),
        parts=tuple(int(p) for p in d.get("parts", ())),
        part_masks=part_masks,
    )


def to_image_scale(t: RelationTriplet, stride: int, width: int, height: int) -> RelationTriplet:
    """Upsample every mask of a feature-scale triplet to image resolution."""
    def up(m):
        return upsample_mask(m, stride, width, height) if m is not None else None

    def ent(e):
        return EntityPrediction(e.category, e.center, up(e.mask), e.score)

    return RelationTriplet(t.relation, t.score, ent(t.subject), ent(t.object), t.relation_point,
                           t.relation_score, t.parts,
                           {p: up(m) for p, m in t.part_masks.items()})


def predictions_to_json(images: dict[str, tuple[int, int, list[RelationTriplet]]]) -> str:
    payload = {"images": {
        name: {"width": w, "height": h, "triplets": [triplet_to_dict(t) for t in ts]}
        for name, (w, h, ts) in sorted(images.items())
    }}
    return json.dumps(payload, separators=(",", ":"))


def load_predictions(path: str | Path) -> dict[str, tuple[int, int, list[RelationTriplet]]]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or "images" not in data:
        raise ValueError(f"{path}: not a predictions file (missing 'images')")
    out = {}
    for name, img in data["images"].items():
        try:
            w, h = int(img["width"]), int(img["height"])
            out[name] = (w, h, [triplet_from_dict(t, w, h) for t in img["triplets"]])
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"scene {name}: malformed prediction ({e})") from None
    return out


def render_labels(scene: SceneAnnotation) -> np.ndarray:
    """H x W x 2 float tensor: entity id + 1 (last writer wins) and parsing label."""
    out = np.zeros((scene.image_height, scene.image_width, 2), dtype=np.float32)
    for e in scene.entities:
        out[:, :, 0][e.mask.to_bitmap()] = e.id + 1
    if scene.parsing is not None:
        out[:, :, 1] = scene.parsing
    return out
