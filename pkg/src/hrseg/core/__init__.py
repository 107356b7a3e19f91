from .masks import (
    Mask,
    MaskError,
    mask_area,
    mask_iou,
    mass_center,
    rle_decode,
    rle_encode,
    tight_bbox,
    upsample_mask,
)
from .scene import EntityAnnotation, RelationAnnotation, SceneAnnotation, SceneError
from .schema import ACTION, GEOMETRIC, CategorySchema, SchemaError
from .tensors import TensorError, as_tensor, decode_hrst, encode_hrst, read_hrst, write_hrst

__all__ = [
    "ACTION",
    "GEOMETRIC",
    "CategorySchema",
    "EntityAnnotation",
    "Mask",
    "MaskError",
    "RelationAnnotation",
    "SceneAnnotation",
    "SceneError",
    "SchemaError",
    "TensorError",
    "as_tensor",
    "decode_hrst",
    "encode_hrst",
    "mask_area",
    "mask_iou",
    "mass_center",
    "read_hrst",
    "rle_decode",
    "rle_encode",
    "tight_bbox",
    "upsample_mask",
    "write_hrst",
]
