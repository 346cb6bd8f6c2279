"""Shipped task-sequence presets for the three urban/object hierarchies."""

from __future__ import annotations

import json
from importlib import resources

from ..ontology import TaskSequence, sequence_from_obj

PRESET_NAMES = (
    "cs_ex1",
    "cs_ex2",
    "voc_ex1",
    "voc_ex2",
    "voc_ex3",
    "mv_ex1",
    "mv_ex2",
)


def load_preset(name: str) -> TaskSequence:
    if name not in PRESET_NAMES:
        raise KeyError(
            f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}"
        )
    text = (
        resources.files("cleo.presets").joinpath(f"{name}.json").read_text("utf-8")
    )
    return sequence_from_obj(json.loads(text))
