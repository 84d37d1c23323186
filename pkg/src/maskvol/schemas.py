"""JSON schema for scene files; ``docs/scene_schema.json`` is a copy of this."""
from __future__ import annotations

import jsonschema

from .errors import FormatError

_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_rgb = {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 3, "maxItems": 3}


def _matrix(n):
    return {"type": "array", "minItems": n, "maxItems": n, "items": {"type": "array", "items": {"type": "number"}, "minItems": n, "maxItems": n}}


SCENE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "maskvol scene",
    "type": "object",
    "additionalProperties": False,
    "required": ["format", "version", "seed", "bounds", "background_rgb", "lidar_origin", "rig", "primitives"],
    "properties": {
        "format": {"const": "maskvol-scene"},
        "version": {"const": 1},
        "seed": {"type": "integer"},
        "bounds": {
            "type": "object",
            "additionalProperties": False,
            "required": ["min", "max"],
            "properties": {"min": _vec3, "max": _vec3},
        },
        "background_rgb": _rgb,
        "lidar_origin": _vec3,
        "rig": {
            "type": "object",
            "additionalProperties": False,
            "required": ["image_size", "views"],
            "properties": {
                "image_size": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
                "views": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["intrinsics", "extrinsics_l2c"],
                        "properties": {"intrinsics": _matrix(3), "extrinsics_l2c": _matrix(4)},
                    },
                },
            },
        },
        "primitives": {
            "type": "array",
            "minItems": 1,
            "items": {
                "oneOf": [
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["kind", "center", "radius", "albedo"],
                        "properties": {"kind": {"const": "sphere"}, "center": _vec3, "radius": {"type": "number", "exclusiveMinimum": 0}, "albedo": _rgb},
                    },
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["kind", "center", "half_extents", "albedo"],
                        "properties": {"kind": {"const": "box"}, "center": _vec3, "half_extents": _vec3, "albedo": _rgb},
                    },
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["kind", "normal", "offset", "albedo"],
                        "properties": {"kind": {"const": "halfspace"}, "normal": _vec3, "offset": {"type": "number"}, "albedo": _rgb},
                    },
                ]
            },
        },
    },
}


def validate_scene_doc(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCENE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"invalid scene file: {exc.message}") from exc
