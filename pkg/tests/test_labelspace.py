import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mdet3d.geometry import Box3D
from mdet3d.labelspace import (
    BUILTIN_DATASETS,
    REFERENCE_UNIFIED_SIZE,
    SynonymCycleError,
    SynonymTable,
    Vocabulary,
    build,
    builtin_vocabularies,
    builtin_vocabulary,
    label_space_report,
    normalize,
    project_gt,
)
from mdet3d.scene import Scene


def raw_fixture_names(dataset_id):
    ref = resources.files("mdet3d").joinpath("data", "vocabularies", f"{dataset_id}.json")
    return json.loads(ref.read_text(encoding="utf-8"))["classes"]


def test_normalize_examples():
    assert normalize(" Chair ") == "chair"
    assert normalize("tv   monitor") == "tv monitor"
    assert normalize("garbagebin", SynonymTable([("garbagebin", "trash can")])) == "trash can"
    with pytest.raises(ValueError):
        normalize("   ")


@given(st.text(alphabet="abcXYZ \t", min_size=1).filter(lambda s: s.strip()))
def test_normalize_idempotent(name):
    assert normalize(normalize(name)) == normalize(name)


def test_synonym_cycle_and_conflict():
    with pytest.raises(SynonymCycleError):
        SynonymTable([("a", "b"), ("b", "c"), ("c", "a")])
    with pytest.raises(ValueError):
        SynonymTable([("a", "b"), ("a", "c")])
    assert SynonymTable([("a", "b"), ("b", "c")])("a") == "c"


def test_synonym_file(tmp_path):
    p = tmp_path / "syn.json"
    p.write_text(json.dumps([{"from": "garbagebin", "to": "trash can"}]))
    assert SynonymTable.load(p)("garbagebin") == "trash can"
    p.write_text(json.dumps([{"from": "a", "to": "b"}, {"from": "b", "to": "a"}]))
    with pytest.raises(SynonymCycleError):
        SynonymTable.load(p)


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ValueError, match="repeats"):
        Vocabulary("x", ("Chair", "chair "))


def test_vocabulary_file_roundtrip(tmp_path):
    v = builtin_vocabulary("s3dis")
    v.dump(tmp_path / "v.json")
    assert Vocabulary.load(tmp_path / "v.json") == v


def test_fixture_sizes():
    sizes = {v.dataset_id: len(v) for v in builtin_vocabularies()}
    assert sizes == {"scannet": 18, "arkitscenes": 17, "s3dis": 5, "multiscan": 17, "3rscan": 18, "scannetpp": 84}


def test_partitioned_159():
    ls = build(builtin_vocabularies(), "partitioned")
    assert len(ls) == 159
    ranges = ls.head_ranges()
    spans = sorted(ranges.values())
    assert spans[0][0] == 0 and spans[-1][1] == 159
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))


def test_unified_scannet_3rscan_18():
    assert len(build([builtin_vocabulary("scannet"), builtin_vocabulary("3rscan")], "unified")) == 18


def test_unified_all_98_matches_set_union_oracle():
    union = set()
    for d in BUILTIN_DATASETS:
        union |= {" ".join(n.lower().split()) for n in raw_fixture_names(d)}
    ls = build(builtin_vocabularies(), "unified")
    assert len(ls) == len(union) == 98
    assert set(ls.classes) == union


def test_report_documents_reference_gap():
    rep = label_space_report()
    assert rep["partitioned"] == 159 and rep["unified"] == 98
    assert str(REFERENCE_UNIFIED_SIZE) in rep["note"] and "98" in rep["note"]


def test_separate_mode():
    spaces = build(builtin_vocabularies()[:2], "separate")
    assert set(spaces) == {"scannet", "arkitscenes"}
    assert len(spaces["scannet"]) == 18


def test_unknown_mode():
    with pytest.raises(ValueError):
        build(builtin_vocabularies(), "merged")


def _scene(ds, cls):
    return Scene(np.zeros((1, 6)), ((Box3D((0, 0, 0), (1, 1, 1)), cls),), ds)


def test_project_gt_unified_shares_index():
    ls = build(builtin_vocabularies(), "unified")
    assert project_gt(_scene("scannet", "chair"), ls)[0] == project_gt(_scene("s3dis", "chair"), ls)[0]


def test_project_gt_partitioned_disjoint():
    ls = build(builtin_vocabularies(), "partitioned")
    a = project_gt(_scene("scannet", "chair"), ls)[0]
    b = project_gt(_scene("s3dis", "Chair"), ls)[0]
    assert a != b
    assert ls.classes[a] == "scannet:chair" and ls.classes[b] == "s3dis:chair"


def test_project_gt_unknown_class():
    ls = build(builtin_vocabularies(), "unified")
    with pytest.raises(KeyError, match="zebra.*scannet"):
        project_gt(_scene("scannet", "zebra"), ls)
    with pytest.raises(KeyError):
        project_gt(_scene("nuscenes", "chair"), ls)


def test_synonym_merges_unified():
    syn = SynonymTable([("garbagebin", "trash can")])
    plain = build(builtin_vocabularies(), "unified")
    merged = build(builtin_vocabularies(), "unified", syn)
    assert "garbagebin" in plain.classes
    if "trash can" in plain.classes:
        assert len(merged) == len(plain) - 1
    assert "garbagebin" not in merged.classes


names = st.sampled_from(["chair", "table", "sofa", "bed", "lamp", "door", "sink", "tv"])


@st.composite
def vocab_lists(draw):
    n = draw(st.integers(1, 4))
    out = []
    for i in range(n):
        cls = draw(st.lists(names, min_size=1, max_size=6, unique=True))
        out.append(Vocabulary(f"d{i}", tuple(cls)))
    return out


@given(vocab_lists(), st.randoms())
def test_unified_properties(vocabs, rnd):
    uni = build(vocabs, "unified")
    part = build(vocabs, "partitioned")
    assert len(uni) <= len(part)
    sets = [set(v.classes) for v in vocabs]
    disjoint = all(not (a & b) for i, a in enumerate(sets) for b in sets[i + 1 :])
    assert (len(uni) == len(part)) == disjoint
    shuffled = list(vocabs)
    rnd.shuffle(shuffled)
    assert set(build(shuffled, "unified").classes) == set(uni.classes)
    # equal names map to equal indices across datasets
    for v in vocabs:
        for c in v.classes:
            assert uni.classes[uni.global_index(v.dataset_id, c)] == c
