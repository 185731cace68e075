"""Image manifests and a synthetic two-domain generator.

The synthetic generator stands in for an illustration collection plus a photo
dataset: each class has a latent mean built top-down along a random taxonomy,
illustrations are ``A_s @ mu + noise`` and photos ``A_x @ mu + noise`` with two
different full-rank maps.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .alignment import PAData
from .errors import (
    InvalidSpec,
    MissingFile,
    MissingSideInformation,
    UnknownClass,
    UnseenPhotoLeak,
)
from .taxonomy import HOPS, Split, Taxonomy, make_split, random_taxonomy

ILLUSTRATION, PHOTO = "illustration", "photo"
DOMAINS = (ILLUSTRATION, PHOTO)
MANIFEST_COLUMNS = ("path", "class_id", "domain", "split")


@dataclass
class SyntheticSpec:
    num_classes: int = 30
    latent_dim: int = 32
    obs_dim: int = 64
    seen_count: int = 20
    noise_source: float = 0.5
    noise_target: float = 1.5
    source_per_class: int = 3
    target_train_per_class: int = 30
    target_test_per_class: int = 15
    maps: str = "random"
    domain_gap: float = 1.0
    branching: tuple[int, int, int] = (8, 2, 2)
    level_scales: tuple[float, float, float, float] = (0.6, 0.5, 0.4, 0.5)
    ensure_all_hops: bool = True
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.num_classes < 2:
            raise InvalidSpec("num_classes must be >= 2")
        if not 0 < self.seen_count < self.num_classes:
            raise InvalidSpec("seen_count must be in (0, num_classes)")
        if min(self.noise_source, self.noise_target, self.domain_gap) < 0:
            raise InvalidSpec("noise scales and domain_gap must be >= 0")
        if self.maps not in ("random", "identity"):
            raise InvalidSpec("maps must be 'random' or 'identity'")
        if self.maps == "identity" and self.obs_dim != self.latent_dim:
            raise InvalidSpec("identity maps need obs_dim == latent_dim")
        if min(self.source_per_class, self.target_train_per_class, self.target_test_per_class) < 1:
            raise InvalidSpec("every class needs at least one sample per domain and split")
        if len(self.branching) != 3 or min(self.branching) < 1:
            raise InvalidSpec("branching is (orders, families per order, genera per family), all >= 1")
        if len(self.level_scales) != 4:
            raise InvalidSpec("level_scales has one entry per level: order, family, genus, species")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise InvalidSpec(f"unknown synthetic spec keys {sorted(set(d) - known)}")
        d = dict(d)
        for key in ("branching", "level_scales"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["branching"], d["level_scales"] = list(self.branching), list(self.level_scales)
        return d


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    taxonomy: Taxonomy
    split: Split
    class_ids: list[str]
    means: np.ndarray
    map_source: np.ndarray
    map_target: np.ndarray
    x_source: np.ndarray
    y_source: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def seen_labels(self) -> list[int]:
        return [i for i, c in enumerate(self.class_ids) if c in self.split.seen]

    @property
    def unseen_labels(self) -> list[int]:
        return [i for i, c in enumerate(self.class_ids) if c not in self.split.seen]

    def pa_data(self) -> PAData:
        return PAData(self.class_ids, self.seen_labels, self.x_source, self.y_source,
                      self.x_train, self.y_train)


def _full_rank(a: np.ndarray) -> bool:
    return np.linalg.matrix_rank(a) == min(a.shape)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Draw a deterministic two-domain dataset and taxonomy from ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    orders, fams, gens = spec.branching
    tax = random_taxonomy(spec.num_classes, rng, orders, fams, gens, ragged=True)
    class_ids = tax.species
    k, d = spec.num_classes, spec.latent_dim

    # latent means: one offset per taxon on the path, so relatives sit close
    s_o, s_f, s_g, s_s = spec.level_scales
    offsets: dict[str, np.ndarray] = {}

    def offset(name, scale):
        if name not in offsets:
            offsets[name] = rng.normal(0.0, scale, d)
        return offsets[name]

    means = np.stack([
        offset(o, s_o) + offset(f, s_f) + offset(g, s_g) + rng.normal(0.0, s_s, d)
        for g, f, o in (tax.lineage[c] for c in class_ids)
    ])

    if spec.maps == "identity":
        a_s = np.eye(spec.obs_dim)
        a_x = np.eye(spec.obs_dim) + spec.domain_gap * rng.normal(0, 1 / np.sqrt(d), (d, d)) \
            if spec.domain_gap > 0 else np.eye(spec.obs_dim)
    else:
        a_s = rng.normal(0.0, 1 / np.sqrt(d), (spec.obs_dim, d))
        a_x = a_s + spec.domain_gap * rng.normal(0.0, 1 / np.sqrt(d), (spec.obs_dim, d))
    if not (_full_rank(a_s) and _full_rank(a_x)):
        raise InvalidSpec("domain maps are rank deficient; change the seed")

    def draw(a, sigma, per_class):
        y = np.repeat(np.arange(k), per_class)
        x = means[y] @ a.T + sigma * rng.standard_normal((len(y), spec.obs_dim))
        return x, y

    x_source, y_source = draw(a_s, spec.noise_source, spec.source_per_class)
    x_photo, y_photo = draw(a_x, spec.noise_target, spec.target_train_per_class)
    x_test, y_test = draw(a_x, spec.noise_target, spec.target_test_per_class)

    split = _draw_split(tax, spec)
    seen_mask = np.isin(y_photo, [i for i, c in enumerate(class_ids) if c in split.seen])
    return SyntheticDataset(
        spec, tax, split, class_ids, means, a_s, a_x,
        x_source, y_source, x_photo[seen_mask], y_photo[seen_mask], x_test, y_test,
    )


def _draw_split(tax: Taxonomy, spec: SyntheticSpec) -> Split:
    # walk a fixed seed sequence until every hop set is populated
    for attempt in range(1000):
        split = make_split(tax, spec.seen_count, spec.seed + attempt)
        if not spec.ensure_all_hops or all(split.hop_sets[i] for i in HOPS):
            return split
    raise InvalidSpec("no split with four non-empty hop sets found; widen the branching")


# --- manifests ----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    class_id: str
    domain: str
    split: str = "train"


@dataclass
class Manifest:
    """Image records plus the directory their relative paths resolve against."""

    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    @property
    def classes(self) -> list[str]:
        return sorted({r.class_id for r in self.records})

    def select(self, domain: str | None = None, split: str | None = None) -> list[ManifestRecord]:
        return [r for r in self.records
                if (domain is None or r.domain == domain) and (split is None or r.split == split)]

    def resolve(self, rec: ManifestRecord) -> tuple[Path, int | None]:
        path, _, row = rec.path.partition("#")
        p = Path(path)
        if not p.is_absolute():
            p = self.root / p
        return p, (int(row) if row else None)

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for r in self.records:
                w.writerow((r.path, r.class_id, r.domain, r.split))


def validate_manifest(manifest: Manifest, classes: Iterable[str] | None = None,
                      split: Split | None = None, check_paths: bool = True) -> Manifest:
    """Enforce the zero-shot contract on ``manifest``.

    Every record's domain is known, its class registered and its file present;
    every registered class has an illustration; with a ``split``, no photo of
    an unseen class is tagged for training.
    """
    registry = set(classes) if classes is not None else None
    if registry is None and split is not None:
        registry = set(split.classes)
    for r in manifest.records:
        if r.domain not in DOMAINS:
            raise ValueError(f"record {r.path!r}: domain must be one of {DOMAINS}, got {r.domain!r}")
        if registry is not None and r.class_id not in registry:
            raise UnknownClass(f"record {r.path!r}: unknown class {r.class_id!r}")
        if check_paths:
            p, _ = manifest.resolve(r)
            if not p.exists():
                raise MissingFile(f"manifest entry {r.path!r} does not resolve ({p})")
    illustrated = {r.class_id for r in manifest.records if r.domain == ILLUSTRATION}
    expected = registry if registry is not None else set(manifest.classes)
    lacking = sorted(expected - illustrated)
    if lacking:
        raise MissingSideInformation(f"classes without any illustration: {lacking[:5]}")
    if split is not None:
        leaks = sorted({r.class_id for r in manifest.records
                        if r.domain == PHOTO and r.split == "train" and r.class_id not in split.seen})
        if leaks:
            raise UnseenPhotoLeak(f"training photos of unseen classes: {leaks[:5]}")
    return manifest


def load_manifest(path, classes: Iterable[str] | None = None, split: Split | None = None,
                  check_paths: bool = True) -> Manifest:
    """Read ``path,class_id,domain[,split]`` rows (``split`` defaults to train) and validate."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"manifest {path} not found")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        for col in MANIFEST_COLUMNS[:3]:
            if col not in header:
                raise ValueError(f"{path}: manifest header lacks {col!r}")
        records = [ManifestRecord(row["path"].strip(), row["class_id"].strip(),
                                  row["domain"].strip(), (row.get("split") or "train").strip())
                   for row in reader]
    return validate_manifest(Manifest(records, path.parent), classes, split, check_paths)


class VectorLoader:
    """Loads manifest entries as float vectors.

    ``.npy`` paths load directly (``file.npy#i`` selects row ``i`` of a 2-D
    array); other files are decoded as images with Pillow, converted to
    grayscale, resized to ``image_size`` squared and flattened to [0, 1].
    """

    def __init__(self, manifest: Manifest, image_size: int = 16):
        self.manifest = manifest
        self.image_size = image_size
        self._arrays: dict[Path, np.ndarray] = {}

    def _array(self, p: Path) -> np.ndarray:
        if p not in self._arrays:
            if not p.exists():
                raise MissingFile(str(p))
            self._arrays[p] = np.load(p)
        return self._arrays[p]

    def load(self, rec: ManifestRecord) -> np.ndarray:
        p, row = self.manifest.resolve(rec)
        if p.suffix == ".npy":
            arr = self._array(p)
            return np.asarray(arr[row] if row is not None else arr, dtype=np.float64).reshape(-1)
        from PIL import Image  # optional dependency, images only

        with Image.open(p) as im:
            im = im.convert("L").resize((self.image_size, self.image_size))
            return np.asarray(im, dtype=np.float64).reshape(-1) / 255.0

    def stack(self, records: Sequence[ManifestRecord]) -> np.ndarray:
        return np.stack([self.load(r) for r in records]) if records else np.zeros((0, 0))


def write_synthetic(ds: SyntheticDataset, out_dir) -> Path:
    """Materialize a synthetic dataset as ``.npy`` arrays, a manifest, the
    taxonomy, the split and the generating spec. Returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"illustrations.npy": ds.x_source, "photos_train.npy": ds.x_train,
              "photos_test.npy": ds.x_test}
    for name, arr in arrays.items():
        np.save(out / name, arr)
    recs = []
    for name, labels, domain, tag in (
        ("illustrations.npy", ds.y_source, ILLUSTRATION, "train"),
        ("photos_train.npy", ds.y_train, PHOTO, "train"),
        ("photos_test.npy", ds.y_test, PHOTO, "test"),
    ):
        recs.extend(ManifestRecord(f"{name}#{i}", ds.class_ids[y], domain, tag)
                    for i, y in enumerate(labels))
    manifest = Manifest(recs, out)
    manifest.save(out / "manifest.csv")
    ds.taxonomy.save(out / "taxonomy.csv")
    ds.split.save(out / "split.json")
    (out / "synthetic_spec.json").write_text(json.dumps(ds.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return out / "manifest.csv"
