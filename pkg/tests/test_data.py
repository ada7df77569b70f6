"""Manifest parsing, cohort extraction, splitting, image loading, and the
synthetic generator."""

import csv
import io
import json
import math

import numpy as np
import pytest
from PIL import Image

from cxrnet.data import (
    Cohort,
    LabeledRecord,
    SyntheticSpec,
    _split_sizes,
    extract_cohort,
    generate_synthetic,
    load_image,
    parse_manifest,
    read_cohort_csv,
    split,
    synth_image,
    write_cohort_csv,
)
from cxrnet.errors import DataError

HEADER = "Path,Sex,Age,Frontal/Lateral,AP/PA,Cardiomegaly,Lung Lesion"


def manifest(*rows):
    return [HEADER] + list(rows)


def test_parse_manifest_fields():
    recs = parse_manifest(
        manifest(
            "train/patient00001/study1/view1_frontal.jpg,Female,68,Frontal,AP,1.0,0.0",
            "train/patient00002/study2/view2_lateral.jpg,Male,0,Lateral,,0.0,-1.0",
            "other/image.png,Unknown,50,FRONTAL,LL,,1.0",
        )
    )
    assert len(recs) == 3
    assert recs[0].view == "frontal" and recs[0].projection == "ap"
    assert recs[0].patient_id == "patient00001"
    assert recs[0].labels == {"Cardiomegaly": "positive", "Lung Lesion": "negative"}
    assert recs[1].view == "lateral" and recs[1].projection == "unknown"
    assert recs[1].labels == {"Cardiomegaly": "negative", "Lung Lesion": "uncertain"}
    # no patientNNN segment: the path itself identifies the patient
    assert recs[2].patient_id == "other/image.png"
    assert recs[2].view == "frontal" and recs[2].projection == "unknown"
    assert recs[2].labels == {"Cardiomegaly": "unmentioned", "Lung Lesion": "positive"}


def test_parse_manifest_skips_blank_lines():
    recs = parse_manifest(manifest("a/patient1/x.jpg,F,1,Frontal,PA,1.0,0.0", "", "b/patient2/y.jpg,M,2,Frontal,AP,0.0,0.0"))
    assert [r.patient_id for r in recs] == ["patient1", "patient2"]


@pytest.mark.parametrize(
    "rows,fragment",
    [
        ([], "empty"),
        (["Path,Sex,Age", "x,F,1"], "missing mandatory"),
        (manifest("x,F,1,Frontal,AP,1.0"), "row 2"),  # short row
        (manifest("a,F,1,Frontal,AP,1.0,0.0", "b,F,1,Frontal,AP,maybe,0.0"), "row 3"),
        (manifest(",F,1,Frontal,AP,1.0,0.0"), "empty Path"),
        (manifest("x,F,1,Oblique,AP,1.0,0.0"), "Frontal or Lateral"),
        (manifest("x,F,1,Frontal,AP,2.0,0.0"), "unparseable label"),
    ],
)
def test_parse_manifest_errors(rows, fragment):
    with pytest.raises(DataError, match=fragment):
        parse_manifest(rows)


def test_parse_emit_round_trip(tmp_path):
    spec = SyntheticSpec(side=12, counts=(3, 1, 1), positive_fraction=0.4, radius_range=(2.0, 3.0), seed=3)
    recs = parse_manifest(generate_synthetic(spec, tmp_path))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Path", "Sex", "Age", "Frontal/Lateral", "AP/PA", "Lung Lesion"])
    back = {"positive": "1.0", "negative": "0.0", "uncertain": "-1.0", "unmentioned": ""}
    for r in recs:
        writer.writerow([r.path, "Unknown", "0", r.view.capitalize(), r.projection.upper(), back[r.labels["Lung Lesion"]]])
    assert parse_manifest(buf.getvalue().splitlines()) == recs


LR = LabeledRecord


def test_extract_cohort_policies():
    rows = manifest(
        "a/patient1/f.jpg,F,1,Frontal,AP,1.0,1.0",
        "a/patient2/f.jpg,F,1,Frontal,AP,0.0,0.0",
        "a/patient3/f.jpg,F,1,Frontal,AP,1.0,-1.0",
        "a/patient4/f.jpg,F,1,Frontal,AP,1.0,",
        "a/patient5/l.jpg,F,1,Lateral,AP,1.0,1.0",
    )
    recs = parse_manifest(rows)
    assert extract_cohort(recs, "lung lesion") == [LR("a/patient1/f.jpg", "patient1", 1), LR("a/patient2/f.jpg", "patient2", 0)]
    as_neg = extract_cohort(recs, "Lung Lesion", uncertain_policy="as_negative")
    assert [r.label for r in as_neg] == [1, 0, 0, 0]
    as_pos = extract_cohort(recs, "Lung Lesion", uncertain_policy="as_positive")
    assert [r.label for r in as_pos] == [1, 0, 1, 1]
    everything = extract_cohort(recs, "Lung Lesion", uncertain_policy="as_negative", view_filter="all")
    assert len(everything) == 5 and everything[-1].path == "a/patient5/l.jpg"


def test_extract_cohort_errors():
    recs = parse_manifest(manifest("a/patient1/f.jpg,F,1,Frontal,AP,1.0,-1.0"))
    with pytest.raises(DataError, match="unknown pathology"):
        extract_cohort(recs, "Fracture")
    with pytest.raises(DataError, match="empty"):
        extract_cohort(recs, "Lung Lesion")  # only an uncertain row survives
    with pytest.raises(DataError):
        extract_cohort(recs, "Lung Lesion", uncertain_policy="drop")
    with pytest.raises(DataError):
        extract_cohort(recs, "Lung Lesion", view_filter="frontal")
    with pytest.raises(DataError):
        extract_cohort([], "Lung Lesion")


def lesion_records(n):
    return [LR(f"d/patient{i:03d}/f.jpg", f"patient{i:03d}", int(i % 3 == 0)) for i in range(n)]


def test_split_partitions_every_record():
    recs = lesion_records(53)
    cohort = split(recs, seed=4)
    assert sorted(r.path for r in cohort.records) == sorted(r.path for r in recs)
    by_path = {r.path: r for r in recs}
    for r in cohort.records:
        assert r.label == by_path[r.path].label
    assert len(cohort.records) == 53


@pytest.mark.parametrize("n", [3, 10, 53, 100, 1250])
def test_split_sizes_within_one_of_exact(n):
    cohort = split(lesion_records(n))
    ratios = dict(zip(("train", "val", "test"), (0.64, 0.16, 0.20)))
    for name, ratio in ratios.items():
        got = sum(1 for r in cohort.records if r.split == name)
        assert abs(got - ratio * n) < 1.0


def test_split_sizes_exact_cases():
    assert _split_sizes(100, (0.64, 0.16, 0.20)) == [64, 16, 20]
    assert _split_sizes(1250, (0.64, 0.16, 0.20)) == [800, 200, 250]
    # equal fractional remainders go to the earlier split
    assert _split_sizes(10, (1 / 3, 1 / 3, 1 / 3)) == [4, 3, 3]


def test_split_is_seeded():
    recs = lesion_records(40)
    a = split(recs, seed=1)
    b = split(recs, seed=1)
    c = split(recs, seed=2)
    assert a.records == b.records
    assert a.records != c.records
    assert a.seed == 1


def test_split_per_patient_keeps_patients_whole():
    recs = [LR(f"d/patient{i:02d}/img{j}.jpg", f"patient{i:02d}", i % 2) for i in range(12) for j in range(3)]
    cohort = split(recs, seed=7, unit="per_patient")
    assignment = {}
    for r in cohort.records:
        pid = r.path.split("/")[1]
        assignment.setdefault(pid, set()).add(r.split)
    assert all(len(s) == 1 for s in assignment.values())
    assert len(cohort.records) == 36


def test_split_validation():
    recs = lesion_records(10)
    with pytest.raises(DataError):
        split(recs, ratios=(0.5, 0.5))
    with pytest.raises(DataError):
        split(recs, ratios=(0.8, 0.3, -0.1))
    with pytest.raises(DataError):
        split(recs, ratios=(0.5, 0.4, 0.2))
    with pytest.raises(DataError):
        split(recs, unit="per_study")
    with pytest.raises(DataError):
        split(lesion_records(2))


def test_cohort_csv_round_trip(tmp_path):
    cohort = split(lesion_records(20), seed=3, pathology="lung lesion", policy="as_negative")
    cohort = Cohort(cohort.pathology, cohort.records, cohort.seed, cohort.policy, cohort.split_unit, root="/data/xr")
    out = tmp_path / "cohort.csv"
    write_cohort_csv(cohort, out)
    back = read_cohort_csv(out)
    assert back == cohort
    meta = json.loads((tmp_path / "cohort.meta.json").read_text())
    assert meta["ratios"] == [0.64, 0.16, 0.20]


def test_cohort_csv_defaults_root_to_csv_directory(tmp_path):
    cohort = split(lesion_records(5), pathology="x")
    out = tmp_path / "cohort.csv"
    write_cohort_csv(cohort, out)
    (tmp_path / "cohort.meta.json").unlink()
    assert read_cohort_csv(out).root == str(tmp_path)


@pytest.mark.parametrize(
    "content,fragment",
    [
        ("path,label\na,1\n", "header"),
        ("path,label,split\na,2,train\n", "label"),
        ("path,label,split\na,1,holdout\n", "split"),
        ("path,label,split\n", "empty"),
    ],
)
def test_cohort_csv_validation(tmp_path, content, fragment):
    out = tmp_path / "bad.csv"
    out.write_text(content, encoding="utf-8")
    with pytest.raises(DataError, match=fragment):
        read_cohort_csv(out)


def test_load_image_identity_and_range(tmp_path):
    arr = np.arange(64, dtype=np.uint8).reshape(8, 8) * 4
    p = tmp_path / "img.png"
    Image.fromarray(arr, mode="L").save(p)
    t = load_image(p, 8)
    assert t.shape == (1, 8, 8)
    np.testing.assert_allclose(t.data[0], arr / 255.0, atol=1e-7)
    assert t.data.min() >= 0.0 and t.data.max() <= 1.0


def test_load_image_downscale_averages(tmp_path):
    # 2x2 block of {0, 255} resized to 1x1 lands on the center: mean 127.5
    arr = np.array([[0, 255], [255, 0]], dtype=np.uint8)
    p = tmp_path / "img.png"
    Image.fromarray(arr, mode="L").save(p)
    t = load_image(p, 1)
    assert math.isclose(float(t.data[0, 0, 0]), 0.5, abs_tol=1e-6)


def test_load_image_upscale_shape(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(30, 47), dtype=np.uint8)  # non-square
    p = tmp_path / "img.png"
    Image.fromarray(arr, mode="L").save(p)
    t = load_image(p, 64)
    assert t.shape == (1, 64, 64)


def test_load_image_rgb_uses_luminance(tmp_path):
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    rgb[..., 0] = 200  # pure red
    p = tmp_path / "img.png"
    Image.fromarray(rgb, mode="RGB").save(p)
    t = load_image(p, 4)
    # 0.299 * 200 = 59.8, quantized to the nearest 8-bit level; far from the
    # plain channel mean (66.7), so this pins the luminance weights
    assert abs(float(t.data[0, 0, 0]) * 255.0 - 59.8) <= 0.5


def test_load_image_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_image(tmp_path / "missing.png", 8)
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"definitely not an image")
    with pytest.raises(DataError, match="readable"):
        load_image(junk, 8)


def test_synth_image_blob_contrast():
    spec = SyntheticSpec(side=32)
    rng = np.random.default_rng(0)
    neg, info_n = synth_image(rng, spec, positive=False)
    assert neg.dtype == np.uint8 and neg.shape == (32, 32)
    assert "radius" not in info_n
    pos, info = synth_image(rng, spec, positive=True)
    cy, cx = info["center"]
    peak = pos[cy, cx] / 255.0
    want = min(info["bg_mean"] + info["contrast"], 1.0)
    assert abs(peak - want) < 2.5 / 255.0  # quantization and noise at the peak


def test_synthetic_generation_layout(tmp_path):
    spec = SyntheticSpec(side=12, counts=(5, 2, 2), positive_fraction=0.4, radius_range=(2.0, 3.0), seed=2)
    path = generate_synthetic(spec, tmp_path)
    assert path == tmp_path / "manifest.csv"
    recs = parse_manifest(path)
    assert len(recs) == 9
    labels = [r.labels["Lung Lesion"] for r in recs]
    # round(0.4 * 5) = 2 and round(0.4 * 2) = 1 positives per group, first in group
    assert labels == ["positive"] * 2 + ["negative"] * 3 + ["positive", "negative"] * 2
    assert all(r.view == "frontal" for r in recs)
    assert all((tmp_path / r.path).exists() for r in recs)
    spec_json = json.loads((tmp_path / "synthetic_spec.json").read_text())
    assert spec_json["counts"] == [5, 2, 2] and spec_json["seed"] == 2


def test_synthetic_generation_is_reproducible(tmp_path):
    spec = SyntheticSpec(side=12, counts=(2, 1, 1), positive_fraction=0.5, radius_range=(2.0, 3.0), seed=9)
    m1 = generate_synthetic(spec, tmp_path / "a")
    m2 = generate_synthetic(spec, tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    for rec in parse_manifest(m1):
        assert (tmp_path / "a" / rec.path).read_bytes() == (tmp_path / "b" / rec.path).read_bytes()


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(positive_fraction=0.0),
        dict(positive_fraction=1.0),
        dict(radius_range=(1.0, 3.0)),
        dict(radius_range=(5.0, 4.0)),
        dict(contrast_range=(0.2, 0.5)),
        dict(noise_std=0.5),
        dict(side=8),  # too small for the default radius range
        dict(counts=(0, 0, 0)),
    ],
)
def test_synthetic_spec_validation(kwargs):
    with pytest.raises(DataError):
        SyntheticSpec(**kwargs)
