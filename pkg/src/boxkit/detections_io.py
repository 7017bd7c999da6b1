"""Reading and writing detection files (JSON lines or CSV).

A record is ``image_id, class_id, box = (x1, y1, x2, y2), score``.  JSON
lines hold one object per line::

    {"image_id": "img0", "class_id": 3, "box": [x1, y1, x2, y2], "score": 0.9}

CSV files carry the header ``image_id,class_id,x1,y1,x2,y2,score``.
Floats are written in shortest round-trip form, so a write/load cycle is
lossless.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable

import numpy as np

from .nms import DetectionSet, KeepMask, NmsResult

CSV_HEADER = ["image_id", "class_id", "x1", "y1", "x2", "y2", "score"]
FORMATS = ("jsonl", "csv")


class DetectionFormatError(ValueError):
    """A detection file could not be parsed or holds an invalid record."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def infer_format(path, fmt: str | None = None) -> str:
    if fmt:
        if fmt not in FORMATS:
            raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
        return fmt
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix in (".jsonl", ".json", ".ndjson"):
        return "jsonl"
    raise ValueError(f"cannot infer detection format from {path!r}; pass format explicitly")


def _iter_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                box = rec["box"]
                if len(box) != 4:
                    raise ValueError("box must have 4 numbers")
                yield lineno, (str(rec["image_id"]), int(rec["class_id"]),
                               [float(v) for v in box], float(rec["score"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise DetectionFormatError(path, lineno, f"bad record: {exc}") from None


def _iter_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        if [h.strip() for h in header] != CSV_HEADER:
            raise DetectionFormatError(path, 1, f"expected header {','.join(CSV_HEADER)}")
        for row in reader:
            lineno = reader.line_num
            if not row or not any(cell.strip() for cell in row):
                continue
            try:
                if len(row) != len(CSV_HEADER):
                    raise ValueError(f"expected {len(CSV_HEADER)} fields, got {len(row)}")
                yield lineno, (row[0], int(row[1]), [float(v) for v in row[2:6]], float(row[6]))
            except ValueError as exc:
                raise DetectionFormatError(path, lineno, f"bad record: {exc}") from None


def load_detections(path, fmt: str | None = None) -> dict[str, dict[int, DetectionSet]]:
    """Load a detection file into ``{image_id: {class_id: DetectionSet}}``.

    Images and classes appear in first-seen order; within a channel,
    detections are sorted by score with ties kept in file order.  Each
    detection's ``source_id`` is its line number.
    """
    fmt = infer_format(path, fmt)
    rows = _iter_jsonl(path) if fmt == "jsonl" else _iter_csv(path)
    grouped: dict[str, dict[int, list]] = {}
    for lineno, (image_id, class_id, box, score) in rows:
        x1, y1, x2, y2 = box
        if not all(math.isfinite(v) for v in (*box, score)):
            raise DetectionFormatError(path, lineno, f"record {image_id!r}/{class_id}: non-finite value")
        if not (x1 < x2 and y1 < y2):
            raise DetectionFormatError(
                path, lineno, f"record {image_id!r}/{class_id}: box {box} needs x1 < x2 and y1 < y2")
        if not 0.0 <= score <= 1.0:
            raise DetectionFormatError(
                path, lineno, f"record {image_id!r}/{class_id}: score {score} outside [0, 1]")
        grouped.setdefault(image_id, {}).setdefault(class_id, []).append((lineno, box, score))

    out: dict[str, dict[int, DetectionSet]] = {}
    for image_id, classes in grouped.items():
        out[image_id] = {}
        for class_id, recs in classes.items():
            out[image_id][class_id] = DetectionSet.from_arrays(
                [r[1] for r in recs], [r[2] for r in recs], class_id=class_id,
                image_id=image_id, source_ids=[r[0] for r in recs])
    return out


def channels(detections: dict[str, dict[int, DetectionSet]]) -> list[DetectionSet]:
    """Flatten a loaded map into its channels, in file order."""
    return [d for classes in detections.values() for d in classes.values()]


def _records(results, include_original: bool):
    for dets, res in results:
        for k in np.flatnonzero(res.keep.keep):
            rec = {
                "image_id": dets.image_id,
                "class_id": int(dets.class_id),
                "box": [float(v) for v in res.boxes[k]],
                "score": float(res.scores[k]),
            }
            if include_original:
                rec["orig_box"] = [float(v) for v in dets.boxes[k]]
            yield rec


def write_results(path, results: Iterable[tuple[DetectionSet, NmsResult]], fmt: str | None = None,
                  include_original: bool = False) -> int:
    """Write the kept detections of each ``(channel, result)`` pair.

    Output uses the input schema so it can be loaded again.  JSON lines may
    also carry ``orig_box``, the pre-merge coordinates.  Returns the
    number of records written.
    """
    fmt = infer_format(path, fmt)
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if fmt == "jsonl":
            for rec in _records(results, include_original):
                fh.write(json.dumps(rec) + "\n")
                count += 1
        else:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for rec in _records(results, False):
                writer.writerow([rec["image_id"], rec["class_id"], *map(repr, rec["box"]),
                                 repr(rec["score"])])
                count += 1
    return count


def write_detections(path, sets: Iterable[DetectionSet], fmt: str | None = None) -> int:
    """Write whole channels (every detection), e.g. to dump a counterexample."""
    pairs = [(d, NmsResult.plain(d, KeepMask(np.ones(len(d), dtype=bool)))) for d in sets]
    return write_results(path, pairs, fmt)


def group_by_image(results: Iterable[tuple[DetectionSet, NmsResult]]):
    by_image = defaultdict(list)
    for dets, res in results:
        by_image[dets.image_id].append((dets, res))
    return dict(by_image)
