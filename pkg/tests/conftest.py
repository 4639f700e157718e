from pathlib import Path

import numpy as np
import pytest
from PIL import Image

FAKE_CLASSES = ["001.Red_Bird", "002.Blue_Bird", "003.Green_Bird"]
FAKE_ATTRIBUTES = ["has_wing_color::red", "has_wing_color::blue", "has_bill_shape::cone", "has_throat_color::white"]
# (image id, class id, is_train, bbox x y w h)
FAKE_IMAGES = [
    (1, 1, 1, (2, 3, 10, 12)),
    (2, 1, 0, (0, 0, 16, 20)),
    (3, 2, 1, (4, 4, 8, 8)),
    (4, 2, 0, (1, 2, 14, 9)),
    (5, 3, 1, (5.5, 6.5, 9.0, 7.0)),
    (6, 3, 0, (3, 1, 12, 15)),
]
# (image id, attribute id, is_present, certainty)
FAKE_LABELS = [
    (1, 1, 1, 4), (1, 3, 1, 3), (3, 2, 1, 2), (3, 4, 1, 1),
    (5, 3, 1, 4), (5, 4, 0, 4), (2, 1, 1, 4), (4, 2, 1, 4), (6, 3, 1, 4),
]


def write_fake_cub(root: Path, nested: bool = True, extra_fields: bool = True) -> Path:
    """Tiny CUB-style tree; returns the directory holding the annotation files."""
    base = root / "CUB_200_2011" if nested else root
    (base / "attributes").mkdir(parents=True)
    (base / "images").mkdir()
    rng = np.random.default_rng(0)
    lines = {k: [] for k in ("images", "labels", "split", "boxes")}
    for img_id, cls, train, box in FAKE_IMAGES:
        rel = f"{FAKE_CLASSES[cls - 1]}/img_{img_id}.png"
        (base / "images" / rel).parent.mkdir(exist_ok=True)
        Image.fromarray(rng.integers(0, 256, size=(20, 16, 3), dtype=np.uint8)).save(base / "images" / rel)
        lines["images"].append(f"{img_id} {rel}")
        lines["labels"].append(f"{img_id} {cls}")
        lines["split"].append(f"{img_id} {train}")
        lines["boxes"].append(f"{img_id} " + " ".join(str(v) for v in box))
    (base / "images.txt").write_text("\n".join(lines["images"]) + "\n")
    (base / "image_class_labels.txt").write_text("\n".join(lines["labels"]) + "\n")
    (base / "train_test_split.txt").write_text("\n".join(lines["split"]) + "\n")
    (base / "bounding_boxes.txt").write_text("\n".join(lines["boxes"]) + "\n")
    (base / "classes.txt").write_text("".join(f"{i + 1} {n}\n" for i, n in enumerate(FAKE_CLASSES)))
    (root / "attributes.txt").write_text("".join(f"{i + 1} {n}\n" for i, n in enumerate(FAKE_ATTRIBUTES)))
    rows = []
    for img_id, att, present, cert in FAKE_LABELS:
        row = f"{img_id} {att} {present} {cert} 3.5"
        rows.append(row + (" 0" if extra_fields and img_id == 5 else ""))
    (base / "attributes" / "image_attribute_labels.txt").write_text("\n".join(rows) + "\n")
    return base


@pytest.fixture
def fake_cub(tmp_path):
    write_fake_cub(tmp_path / "cub")
    return tmp_path / "cub"


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
