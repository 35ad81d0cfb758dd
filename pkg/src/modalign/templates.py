"""Instruction template registry: modality -> task -> list of templates."""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

CUES = {"image": "image:", "video": "video:", "audio": "audio:", "pc3d": "3d:"}
DISCRN_PREFIX = ("You are given two inputs. Select exactly one of the two by reference to its "
                 "relative position (first or second, left or right) that best answers the question.")
# unseen caption prompts, used for robustness reports
UNSEEN_CAPTION_PROMPTS = (
    "In a few words describe the basic features of this image.",
    "Provide a recap of what is happening in the picture.",
    "I'd like to hear your interpretation of this image. What do you see?",
    "Provide a verbal snapshot of what's happening in this image.",
    "Please articulate the elements and context of this image",
)


class MissingTemplates(KeyError):
    pass


def data_path(name: str) -> Path:
    return Path(str(resources.files("modalign") / "data" / name))


def load_templates(path=None) -> dict[str, dict[str, list[str]]]:
    path = Path(path) if path else data_path("templates.json")
    return json.loads(path.read_text(encoding="utf-8"))


def templates_for(registry: dict, modality: str, task: str) -> list[str]:
    try:
        ts = registry[modality][task]
    except KeyError:
        raise MissingTemplates(f"no templates for modality {modality!r} task {task!r}") from None
    if not ts:
        raise MissingTemplates(f"empty template set for modality {modality!r} task {task!r}")
    return ts


def fill(template: str, question: str = "") -> str:
    return template.replace("{question}", question)
