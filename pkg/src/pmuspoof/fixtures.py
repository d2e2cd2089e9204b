"""Bundled IEEE test systems and PMU placements.

``ieee14``, ``ieee30`` and ``ieee118`` resolve to the packaged data files;
anything else is treated as a filesystem path.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import CaseFormatError
from .netcase import NetworkCase, parse_case
from .pmu import PmuPlacement, parse_placement

BUNDLED = ("ieee14", "ieee30", "ieee118")


def _read(name: str, suffix: str) -> tuple[str, str]:
    if name in BUNDLED:
        return resources.files("pmuspoof").joinpath("data").joinpath(name + suffix).read_text(), name
    path = Path(name)
    try:
        return path.read_text(), path.stem
    except OSError as exc:
        raise CaseFormatError(f"cannot read {path}: {exc.strerror or exc}") from None


def load_case(name: str) -> NetworkCase:
    text, label = _read(name, ".case")
    return parse_case(text, name=label)


def load_placement_ids(name: str) -> list[int]:
    text, _ = _read(name, ".pmu")
    return parse_placement(text)


def load_placement(name: str, case: NetworkCase) -> PmuPlacement:
    return PmuPlacement.from_buses(case, load_placement_ids(name))
