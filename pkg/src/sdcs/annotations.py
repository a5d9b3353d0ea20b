"""Ground-truth annotation sets: centroid + class records per tile.

The JSON file format is an image-level header plus a flat array of
{x, y, class} records:

    {
      "image": "<id>",
      "magnification": "20x",
      "annotations": [{"x": 12, "y": 40, "class": "ki67_pos"}, ...]
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .config import CLASS_NAMES


@dataclass
class AnnotationSet:
    image_id: str
    cells: list = field(default_factory=list)  # (x, y, class_name)
    magnification: str = "20x"

    def __post_init__(self):
        for x, y, cls in self.cells:
            if cls not in CLASS_NAMES:
                raise ValueError(f"unknown class {cls!r}; expected one of {CLASS_NAMES}")
            if x < 0 or y < 0:
                raise ValueError(f"negative coordinate ({x}, {y})")

    def class_counts(self) -> dict:
        counts = {name: 0 for name in CLASS_NAMES}
        for _, _, cls in self.cells:
            counts[cls] += 1
        return counts

    def points(self):
        return [(x, y) for x, y, _ in self.cells]

    def labels(self):
        return [cls for _, _, cls in self.cells]

    def to_json(self) -> str:
        doc = {
            "image": self.image_id,
            "magnification": self.magnification,
            "annotations": [
                {"x": x, "y": y, "class": cls} for x, y, cls in self.cells
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AnnotationSet":
        doc = json.loads(text)
        cells = [(rec["x"], rec["y"], rec["class"]) for rec in doc["annotations"]]
        return cls(
            image_id=doc["image"],
            cells=cells,
            magnification=doc.get("magnification", "20x"),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AnnotationSet":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))
