import json

import numpy as np
import pytest

from boxkit import nms
from boxkit.detections_io import (DetectionFormatError, channels, infer_format, load_detections,
                                  write_detections, write_results)


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def rec(image="a", cls=0, box=(0, 0, 1, 1), score=0.5):
    return {"image_id": image, "class_id": cls, "box": list(box), "score": score}


def random_records(rng, n):
    out = []
    for k in range(n):
        x, y = rng.uniform(0, 100, 2)
        w, h = rng.uniform(1, 30, 2)
        out.append(rec(f"img{k % 4}", int(k % 3), (x, y, x + w, y + h), float(rng.uniform())))
    return out


class TestLoad:
    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert load_detections(tmp_path / "e.jsonl") == {}
        (tmp_path / "e.csv").write_text("")
        assert load_detections(tmp_path / "e.csv") == {}

    def test_one_record(self, tmp_path):
        d = load_detections(write_jsonl(tmp_path / "one.jsonl", [rec(box=(1, 2, 3, 4), score=0.7)]))
        assert list(d) == ["a"] and list(d["a"]) == [0]
        ch = d["a"][0]
        assert len(ch) == 1 and ch.boxes.tolist() == [[1, 2, 3, 4]] and ch.scores[0] == 0.7
        assert ch.source_ids == (1,)

    def test_grouping(self, tmp_path, rng):
        recs = random_records(rng, 30)
        d = load_detections(write_jsonl(tmp_path / "r.jsonl", recs))
        assert sorted(d) == ["img0", "img1", "img2", "img3"]
        assert sum(len(c) for c in channels(d)) == 30
        for ch in channels(d):
            assert np.all(np.diff(ch.scores) <= 0)

    def test_inverted_box_names_record(self, tmp_path):
        path = write_jsonl(tmp_path / "bad.jsonl", [rec(), rec(image="img9", box=(5, 0, 2, 1))])
        with pytest.raises(DetectionFormatError, match=r"bad.jsonl:2.*img9"):
            load_detections(path)

    @pytest.mark.parametrize("line", ['{"image_id": "a"}', "not json",
                                      '{"image_id": "a", "class_id": 0, "box": [0, 0, 1], "score": 0.5}'])
    def test_malformed_jsonl(self, tmp_path, line):
        (tmp_path / "m.jsonl").write_text(line + "\n")
        with pytest.raises(DetectionFormatError):
            load_detections(tmp_path / "m.jsonl")

    def test_score_range_and_finiteness(self, tmp_path):
        with pytest.raises(DetectionFormatError, match="score"):
            load_detections(write_jsonl(tmp_path / "s.jsonl", [rec(score=1.5)]))
        (tmp_path / "n.csv").write_text("image_id,class_id,x1,y1,x2,y2,score\na,0,0,0,nan,1,0.5\n")
        with pytest.raises(DetectionFormatError, match="non-finite"):
            load_detections(tmp_path / "n.csv")

    def test_csv_header_checked(self, tmp_path):
        (tmp_path / "h.csv").write_text("a,b,c\n")
        with pytest.raises(DetectionFormatError, match="header"):
            load_detections(tmp_path / "h.csv")

    def test_format_inference(self):
        assert infer_format("x.CSV") == "csv"
        assert infer_format("x.ndjson") == "jsonl"
        assert infer_format("x.txt", "csv") == "csv"
        with pytest.raises(ValueError):
            infer_format("x.txt")
        with pytest.raises(ValueError):
            infer_format("x.csv", "xml")


class TestWrite:
    def test_empty_results(self, tmp_path):
        assert write_results(tmp_path / "o.jsonl", []) == 0
        assert load_detections(tmp_path / "o.jsonl") == {}
        assert write_results(tmp_path / "o.csv", []) == 0
        assert load_detections(tmp_path / "o.csv") == {}

    @pytest.mark.parametrize("suffix", ["jsonl", "csv"])
    def test_round_trip(self, tmp_path, rng, suffix):
        src = load_detections(write_jsonl(tmp_path / "in.jsonl", random_records(rng, 60)))
        out = tmp_path / f"out.{suffix}"
        write_detections(out, channels(src))
        back = load_detections(out)
        assert list(back) == list(src)
        for image in src:
            for cls, ch in src[image].items():
                other = back[image][cls]
                assert np.allclose(other.boxes, ch.boxes, rtol=0, atol=1e-9)
                assert np.allclose(other.scores, ch.scores, rtol=0, atol=1e-9)

    def test_only_kept_written_with_merged_coordinates(self, tmp_path):
        d = nms.DetectionSet.from_arrays([(0, 0, 2, 2), (1, 0, 3, 2)], [1.0, 0.5], image_id="a")
        res = nms.cluster_nms_w(d, 0.3)
        n = write_results(tmp_path / "w.jsonl", [(d, res)], include_original=True)
        lines = [json.loads(x) for x in (tmp_path / "w.jsonl").read_text().splitlines()]
        assert n == 1 and len(lines) == 1
        assert lines[0]["box"][0] == pytest.approx(1 / 7)
        assert lines[0]["orig_box"] == [0, 0, 2, 2]
