"""Lab panels as ``Name:value`` text, and model input assembly."""

from __future__ import annotations

from dataclasses import dataclass

from .cohort import EncounterRecord, LabPanel
from .errors import ConfigError, DataError

INPUT_MODES = ("notes_only", "labs_text_only", "notes_plus_labs_text")


@dataclass(frozen=True)
class SerializationSpec:
    """``item_order`` is ``"panel"``, ``"alphabetical"`` or an explicit name list.

    Items of the panel missing from an explicit list are appended in panel order.
    """

    item_order: str | tuple[str, ...] = "panel"
    pair_separator: str = ", "
    kv_separator: str = ":"
    preamble: str = ""

    def __post_init__(self):
        if not self.pair_separator or not self.kv_separator:
            raise ConfigError("separators must be non-empty")
        if not isinstance(self.item_order, str):
            if len(set(self.item_order)) != len(self.item_order):
                raise ConfigError("item_order has duplicate names")
        elif self.item_order not in ("panel", "alphabetical"):
            raise ConfigError(f"unknown item_order {self.item_order!r}")


DEFAULT_SPEC = SerializationSpec()


def _ordered_names(panel: LabPanel, spec: SerializationSpec) -> list[str]:
    names = list(panel)
    if spec.item_order == "panel":
        return names
    if spec.item_order == "alphabetical":
        return sorted(names)
    listed = [n for n in spec.item_order if n in panel]
    return listed + [n for n in names if n not in set(spec.item_order)]


def serialize_panel(panel: LabPanel, spec: SerializationSpec = DEFAULT_SPEC) -> str:
    """``Free T4:1.42, TSH:1.450`` style text using the recorded strings verbatim.

    Missing items are simply absent; an empty panel gives ``""``.
    """
    pairs = [f"{name}{spec.kv_separator}{panel[name].raw}" for name in _ordered_names(panel, spec)]
    return spec.pair_separator.join(pairs)


def item_spans(panel: LabPanel, spec: SerializationSpec = DEFAULT_SPEC) -> dict[str, tuple[int, int]]:
    """Character span of each ``Name:value`` pair inside :func:`serialize_panel` output."""
    spans = {}
    pos = 0
    for i, name in enumerate(_ordered_names(panel, spec)):
        if i:
            pos += len(spec.pair_separator)
        piece = f"{name}{spec.kv_separator}{panel[name].raw}"
        spans[name] = (pos, pos + len(piece))
        pos += len(piece)
    return spans


def parse_panel_text(text: str, spec: SerializationSpec = DEFAULT_SPEC) -> list[tuple[str, str]]:
    """Inverse of :func:`serialize_panel`: ``(name, recorded string)`` pairs."""
    if not text:
        return []
    pairs = []
    for chunk in text.split(spec.pair_separator):
        name, sep, raw = chunk.rpartition(spec.kv_separator)
        if not sep or not name:
            raise DataError(f"malformed lab pair {chunk!r}")
        pairs.append((name, raw))
    return pairs


def build_input(
    record: EncounterRecord, mode: str = "notes_only", spec: SerializationSpec = DEFAULT_SPEC
) -> str:
    if mode not in INPUT_MODES:
        raise ConfigError(f"unknown input mode {mode!r}; expected one of {INPUT_MODES}")
    labs = serialize_panel(record.panel, spec)
    if spec.preamble and labs:
        labs = f"{spec.preamble} {labs}"
    if mode == "notes_only":
        if not record.note_text:
            raise DataError(f"record {record.record_id} has no note text")
        return record.note_text
    if mode == "labs_text_only":
        if len(record.panel) == 0:
            raise DataError(f"record {record.record_id} has no lab values")
        return labs
    if not record.note_text:
        raise DataError(f"record {record.record_id} has no note text")
    return f"{record.note_text} {labs}" if labs else record.note_text
