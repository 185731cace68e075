"""Four-level label hierarchy (species -> genus -> family -> order) and
seeded seen/unseen splits stratified by taxonomic hop distance."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    DuplicateSpeciesConflict,
    InconsistentLineage,
    InvalidSeenCount,
    MissingColumn,
    UnknownSpecies,
)

COLUMNS = ("species_id", "genus", "family", "order")
LEVELS = {1: "genus", 2: "family", 3: "order"}
LEVEL_NAMES = ("species", "genus", "family", "order")
HOPS = (1, 2, 3, 4)


@dataclass(frozen=True)
class Taxonomy:
    """Validated species lineage table.

    ``lineage`` maps species id to its ``(genus, family, order)`` tuple and is
    kept sorted by species id so iteration order is stable.
    """

    lineage: Mapping[str, tuple[str, str, str]]

    @property
    def species(self) -> list[str]:
        return list(self.lineage)

    def __len__(self):
        return len(self.lineage)

    def __contains__(self, species_id):
        return species_id in self.lineage

    def taxa(self, level: int) -> set[str]:
        _check_level(level)
        return {lin[level - 1] for lin in self.lineage.values()}

    def _get(self, species_id):
        try:
            return self.lineage[species_id]
        except KeyError:
            raise UnknownSpecies(f"unknown species {species_id!r}") from None

    def rows(self) -> list[dict[str, str]]:
        return [
            dict(zip(COLUMNS, (sid, *lin))) for sid, lin in self.lineage.items()
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for sid, lin in self.lineage.items():
            writer.writerow((sid, *lin))
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _check_level(level):
    if level not in LEVELS:
        raise ValueError(f"level must be one of 1 (genus), 2 (family), 3 (order), got {level!r}")


def load_taxonomy(rows: Iterable[Mapping[str, str]]) -> Taxonomy:
    """Validate lineage rows and build a :class:`Taxonomy`.

    Names are whitespace-trimmed and compared case-sensitively. Duplicate rows
    with identical lineage collapse into one species.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("taxonomy has no rows")
    lineage: dict[str, tuple[str, str, str]] = {}
    parent: dict[tuple[int, str], str] = {}
    for n, row in enumerate(rows):
        missing = [c for c in COLUMNS if c not in row]
        if missing:
            raise MissingColumn(f"row {n} lacks column(s) {missing}")
        sid, genus, family, order = (str(row[c]).strip() for c in COLUMNS)
        if not all((sid, genus, family, order)):
            raise ValueError(f"row {n} has an empty field: {dict(row)}")
        lin = (genus, family, order)
        if sid in lineage:
            if lineage[sid] != lin:
                raise DuplicateSpeciesConflict(
                    f"species {sid!r} listed as {lineage[sid]} and {lin}"
                )
            continue
        # genus -> family and family -> order must be functions
        for level, (child, up) in enumerate(((genus, family), (family, order)), start=1):
            seen_up = parent.setdefault((level, child), up)
            if seen_up != up:
                raise InconsistentLineage(
                    f"{LEVELS[level]} {child!r} appears under both {seen_up!r} and {up!r}"
                )
        lineage[sid] = lin
    return Taxonomy(dict(sorted(lineage.items())))


def read_taxonomy(path) -> Taxonomy:
    """Load a comma-separated taxonomy file with header ``species_id,genus,family,order``."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"{path}: header lacks column(s) {missing}")
        reader.fieldnames = header
        return load_taxonomy(reader)


def ancestor_at_level(tax: Taxonomy, species_id: str, level: int) -> str:
    """Name of the genus (1), family (2) or order (3) of ``species_id``."""
    _check_level(level)
    return tax._get(species_id)[level - 1]


def hop_distance(tax: Taxonomy, species_id: str, seen: Iterable[str]) -> int:
    """Taxonomic distance from ``species_id`` to its nearest seen class.

    0 when the species is itself seen, ``i`` when the closest shared super-class
    sits at level ``i`` (1 genus, 2 family, 3 order) and 4 when no order is shared.
    """
    lin = tax._get(species_id)
    seen = set(seen)
    for s in seen:
        tax._get(s)
    if species_id in seen:
        return 0
    for level in LEVELS:
        if any(tax.lineage[s][level - 1] == lin[level - 1] for s in seen):
            return level
    return 4


def _hop_map(tax: Taxonomy, seen: set[str]) -> dict[str, int]:
    # one pass over the seen set instead of |Y| calls to hop_distance
    seen_taxa = [{tax.lineage[s][lvl - 1] for s in seen} for lvl in LEVELS]
    hops = {}
    for sid, lin in tax.lineage.items():
        if sid in seen:
            continue
        hops[sid] = next(
            (lvl for lvl in LEVELS if lin[lvl - 1] in seen_taxa[lvl - 1]), 4
        )
    return hops


@dataclass(frozen=True)
class Split:
    seen: frozenset[str]
    hop_sets: Mapping[int, frozenset[str]]
    seed: int
    seen_fraction: float

    @property
    def unseen(self) -> frozenset[str]:
        return frozenset().union(*self.hop_sets.values())

    @property
    def classes(self) -> frozenset[str]:
        return self.seen | self.unseen

    def hop_of(self, species_id: str) -> int:
        if species_id in self.seen:
            return 0
        for i, members in self.hop_sets.items():
            if species_id in members:
                return i
        raise UnknownSpecies(f"species {species_id!r} is not part of the split")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "seen": sorted(self.seen),
            "hops": {str(i): sorted(self.hop_sets[i]) for i in HOPS},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: Mapping) -> "Split":
        seen = frozenset(d["seen"])
        hop_sets = {i: frozenset(d["hops"].get(str(i), ())) for i in HOPS}
        total = len(seen) + sum(len(v) for v in hop_sets.values())
        return cls(seen, hop_sets, int(d["seed"]), len(seen) / total)

    @classmethod
    def load(cls, path) -> "Split":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def split_from_seen(tax: Taxonomy, seen: Iterable[str], seed: int = 0) -> Split:
    """Assign every non-seen species of ``tax`` to its hop set."""
    seen = frozenset(seen)
    for s in seen:
        tax._get(s)
    hop_sets = {i: set() for i in HOPS}
    for sid, hop in _hop_map(tax, seen).items():
        hop_sets[hop].add(sid)
    return Split(
        seen=seen,
        hop_sets={i: frozenset(v) for i, v in hop_sets.items()},
        seed=seed,
        seen_fraction=len(seen) / len(tax),
    )


def make_split(tax: Taxonomy, seen_count: int, seed: int) -> Split:
    """Draw ``seen_count`` seen species uniformly at random, then stratify the
    remaining species into 1..4-hop sets."""
    n = len(tax)
    if not 0 < seen_count < n:
        raise InvalidSeenCount(f"seen_count must be in (0, {n}), got {seen_count}")
    rng = np.random.default_rng(seed)
    species = tax.species  # sorted, so the draw only depends on the class list
    idx = rng.choice(n, size=seen_count, replace=False)
    return split_from_seen(tax, (species[i] for i in idx), seed)


def split_stats(split: Split, sample_counts: Mapping[str, int] | None = None) -> dict:
    """Per-set class counts ``K`` and, when sample counts are given, sample counts ``N``."""
    sets = {"seen": split.seen, **{f"{i}-hop": split.hop_sets[i] for i in HOPS}}
    out = {}
    for name, members in sets.items():
        row = {"K": len(members)}
        if sample_counts is not None:
            row["N"] = int(sum(sample_counts.get(c, 0) for c in members))
        out[name] = row
    out["unseen"] = {"K": sum(out[f"{i}-hop"]["K"] for i in HOPS)}
    if sample_counts is not None:
        out["unseen"]["N"] = sum(out[f"{i}-hop"]["N"] for i in HOPS)
    return out


def random_taxonomy(
    n_species: int,
    rng: np.random.Generator,
    orders: int = 3,
    families_per_order: int = 3,
    genera_per_family: int = 3,
    ragged: bool = False,
) -> Taxonomy:
    """Random top-down taxonomy: species are dealt onto a genus tree.

    The tree has ``orders`` orders, each with ``families_per_order`` families of
    ``genera_per_family`` genera; with ``ragged=True`` those counts are upper
    bounds drawn per node, giving uneven clades. Names encode the full path
    (``O1``, ``O1F2``, ``O1F2G0``) so the hierarchy is consistent by
    construction. Genera are filled one species each (in random order) before
    any genus gets a second.
    """
    def width(hi):
        return int(rng.integers(1, hi + 1)) if ragged else hi

    genera = [
        (f"O{o}F{f}G{g}", f"O{o}F{f}", f"O{o}")
        for o in range(orders)
        for f in range(width(families_per_order))
        for g in range(width(genera_per_family))
    ]
    order = rng.permutation(len(genera))
    assignment = [genera[order[i]] if i < len(genera) else genera[rng.integers(len(genera))]
                  for i in range(n_species)]
    digits = len(str(n_species - 1))
    return load_taxonomy(
        {"species_id": f"sp{i:0{digits}d}", "genus": g, "family": f, "order": o}
        for i, (g, f, o) in enumerate(assignment)
    )
