import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llmm.cohort import CATALOG_ORDER, EncounterRecord, LabPanel
from llmm.errors import ConfigError, DataError
from llmm.textualize import (
    SerializationSpec,
    build_input,
    item_spans,
    parse_panel_text,
    serialize_panel,
)

TABLE1_TEXT = ("Free T4:1.42, TSH:1.450, HDL Cholesterol:57, BUN:22, Cholesterol T:146, "
               "Estimated GFR(MDRD):60, Glucose AC:148, ALT (SGPT):29, Uric Acid:6.5, "
               "Creatinine:1.22, K:4.5, Triglyceride:66, LDL Cholesterol:88")
TABLE1 = LabPanel([
    ("Free T4", "1.42"), ("TSH", "1.450"), ("HDL Cholesterol", "57"), ("BUN", "22"),
    ("Cholesterol T", "146"), ("Estimated GFR(MDRD)", "60"), ("Glucose AC", "148"),
    ("ALT (SGPT)", "29"), ("Uric Acid", "6.5"), ("Creatinine", "1.22"), ("K", "4.5"),
    ("Triglyceride", "66"), ("LDL Cholesterol", "88"),
])


def test_table1_string_byte_for_byte():
    assert serialize_panel(TABLE1).encode() == TABLE1_TEXT.encode()


def test_short_example_and_empty_panel():
    p = LabPanel({"Free T4": "1.42", "TSH": "1.450", "HDL Cholesterol": "57"})
    assert serialize_panel(p) == "Free T4:1.42, TSH:1.450, HDL Cholesterol:57"
    assert serialize_panel(LabPanel()) == ""


def test_missing_items_are_omitted():
    assert serialize_panel(LabPanel({"Glucose AC": "148"})) == "Glucose AC:148"


def test_orders():
    p = LabPanel({"TSH": "1.450", "BUN": "13", "K": "4.3"})
    assert serialize_panel(p, SerializationSpec(item_order="alphabetical")) == "BUN:13, K:4.3, TSH:1.450"
    spec = SerializationSpec(item_order=("K", "Missing Item"))
    assert serialize_panel(p, spec) == "K:4.3, TSH:1.450, BUN:13"


def test_spec_validation():
    with pytest.raises(ConfigError):
        SerializationSpec(pair_separator="")
    with pytest.raises(ConfigError):
        SerializationSpec(item_order=("K", "K"))
    with pytest.raises(ConfigError):
        SerializationSpec(item_order="random")


def test_item_spans_locate_pairs():
    text = serialize_panel(TABLE1)
    for name, (s, e) in item_spans(TABLE1).items():
        assert text[s:e] == f"{name}:{TABLE1[name].raw}"


_raw = st.one_of(
    st.integers(0, 99999).map(str),
    st.tuples(st.integers(0, 999), st.integers(0, 3)).flatmap(
        lambda t: st.integers(0, 10 ** max(t[1], 1) - 1).map(
            lambda f: f"{t[0]}.{f:0{max(t[1], 1)}d}")),
)
_panels = st.lists(st.tuples(st.sampled_from(CATALOG_ORDER), _raw), max_size=20,
                   unique_by=lambda t: t[0])


@settings(max_examples=300, deadline=None)
@given(_panels)
def test_round_trip_recovers_pairs(pairs):
    panel = LabPanel(pairs)
    assert parse_panel_text(serialize_panel(panel)) == list(panel.raw_items())


@settings(max_examples=200, deadline=None)
@given(_panels, _panels)
def test_serialization_is_injective(a, b):
    pa, pb = LabPanel(a), LabPanel(b)
    if list(pa.raw_items()) != list(pb.raw_items()):
        assert serialize_panel(pa) != serialize_panel(pb)


def test_parse_rejects_malformed():
    with pytest.raises(DataError):
        parse_panel_text("TSH 1.450")


def test_build_input_modes():
    rec = EncounterRecord("P1", "2020-01-01", note_text="Seen today.", panel=TABLE1)
    assert build_input(rec, "labs_text_only") == TABLE1_TEXT
    assert build_input(rec, "notes_only") == "Seen today."
    assert build_input(rec, "notes_plus_labs_text") == "Seen today. " + TABLE1_TEXT
    plain = EncounterRecord("P1", "2020-01-01", note_text="Seen today.")
    assert build_input(plain, "notes_plus_labs_text") == "Seen today."
    labs_only = EncounterRecord("P1", "2020-01-01", panel=TABLE1)
    with pytest.raises(DataError):
        build_input(labs_only, "notes_only")
    with pytest.raises(DataError):
        build_input(plain, "labs_text_only")
    with pytest.raises(ConfigError):
        build_input(rec, "everything")


def test_preamble_hook():
    rec = EncounterRecord("P1", "2020-01-01", panel=LabPanel({"K": "4.3"}))
    assert build_input(rec, "labs_text_only", SerializationSpec(preamble="Lab results:")) == \
        "Lab results: K:4.3"
