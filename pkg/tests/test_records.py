import pytest
from hypothesis import given
from hypothesis import strategies as st

from pluralign.errors import DataError, ParseError
from pluralign.harness.records import (
    DatasetRecord,
    Feedback,
    escape,
    format_record,
    load_dataset,
    parse_record,
    save_dataset,
    split_calibration,
    unescape,
)

YN = ((0, "No"), (1, "Yes"), (2, "Unsure"))

FIXTURE = [
    DatasetRecord(
        "r1",
        "Is this | a claim: yes; or no?",
        YN,
        (Feedback("hr", "coarse", "be careful, = strict"), Feedback("hr", "granular", "line one\nline two")),
        gold_label=1,
    ),
    DatasetRecord("r2", "naïve café \\ backslash", YN, (), gold_distribution=(0.25, 0.5, 0.25)),
    DatasetRecord("r3", "", ((5, "A"), (7, "B")), (Feedback("x:y", "coarse", ""),), gold_label=7),
]


def test_fixture_round_trip(tmp_path):
    path = tmp_path / "d.records"
    save_dataset(FIXTURE, path)
    assert load_dataset(path) == FIXTURE
    assert len(path.read_text(encoding="utf-8").splitlines()) == 3


def test_empty_file(tmp_path):
    path = tmp_path / "empty.records"
    path.write_text("")
    assert load_dataset(path) == []


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope.records")


def test_gold_sum_tolerance_boundary():
    line = "g|x|0:a;1:b;2:c;3:d;4:e||dist=0.2,0.2,0.2,0.2,0.199999"
    rec = parse_record(line)
    assert sum(rec.gold_distribution) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ParseError):
        parse_record("g|x|0:a;1:b;2:c;3:d;4:e||dist=0.2,0.2,0.2,0.2,0.19999")


@pytest.mark.parametrize(
    "line",
    [
        "only|three|fields",
        "r|x|0:a;zz:b||label=0",
        "r|x|0:a||label=3",
        "r|x|0:a||dist=0.5,0.5",
        "r|x|0:a;0:b||label=0",
        "r|x|0:a|hr:loud:text|label=0",
        "r|x|0:a||median=0",
        "r|x\\|0:a||label=0",
    ],
)
def test_malformed_lines(line):
    with pytest.raises(ParseError):
        parse_record(line)


def test_parse_error_names_the_line(tmp_path):
    path = tmp_path / "bad.records"
    path.write_text(format_record(FIXTURE[0]) + "\n\nbroken line\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_dataset(path)
    assert info.value.line_number == 3
    assert "line 3" in str(info.value)


def test_duplicate_ids(tmp_path):
    path = tmp_path / "dup.records"
    save_dataset([FIXTURE[0], FIXTURE[0]], path)
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(path)


@given(st.text())
def test_escape_round_trip(text):
    assert unescape(escape(text)) == text
    assert "\n" not in escape(text)


@given(
    st.text(min_size=1),
    st.text(),
    st.lists(st.tuples(st.text(min_size=1), st.sampled_from(["coarse", "granular"]), st.text()), max_size=3),
)
def test_record_round_trip(rid, text, fbs):
    rec = DatasetRecord(rid, text, YN, tuple(Feedback(*f) for f in fbs), gold_label=2)
    assert parse_record(format_record(rec)) == rec


def test_record_helpers():
    r = FIXTURE[0]
    assert r.annotators == ["hr"]
    assert r.feedback_text("hr", "granular") == "line one\nline two"
    assert r.feedback_text("hr", "other") is None
    assert r.surface(2) == "Unsure"
    assert FIXTURE[1].gold_majority() == 1


def test_split_calibration():
    recs = [DatasetRecord(f"r{i}", "x", YN, gold_label=0) for i in range(30)]
    calib, rest = split_calibration(recs, 10, seed=3)
    assert len(calib) == 10 and len(rest) == 20
    assert {r.record_id for r in calib}.isdisjoint(r.record_id for r in rest)
    assert split_calibration(recs, 10, seed=3) == (calib, rest)
    assert split_calibration(recs, 10, seed=4)[0] != calib
    assert [r.record_id for r in rest] == sorted((r.record_id for r in rest), key=lambda s: int(s[1:]))
    with pytest.raises(DataError):
        split_calibration(recs, 31, 0)
