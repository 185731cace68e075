import dataclasses

import numpy as np
import pytest

from fgzsl.data import (
    Manifest,
    ManifestRecord,
    SyntheticSpec,
    VectorLoader,
    generate_synthetic,
    load_manifest,
    write_synthetic,
)
from fgzsl.errors import (
    InvalidSpec,
    MissingFile,
    MissingSideInformation,
    UnknownClass,
    UnseenPhotoLeak,
)
from fgzsl.taxonomy import Split, hop_distance


def nearest_center(x, centers):
    d = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
    return d.argmin(1)


def test_defaults_match_benchmark_shape():
    ds = generate_synthetic(SyntheticSpec())
    assert len(ds.class_ids) == 30
    assert len(ds.split.seen) == 20 and len(ds.split.unseen) == 10
    assert ds.x_source.shape[1] == ds.x_test.shape[1] == 64
    assert ds.means.shape == (30, 32)
    assert all(ds.split.hop_sets[i] for i in (1, 2, 3, 4))
    assert np.linalg.matrix_rank(ds.map_source) == np.linalg.matrix_rank(ds.map_target) == 32
    assert not np.allclose(ds.map_source, ds.map_target)


def test_unseen_photos_only_in_test():
    ds = generate_synthetic(SyntheticSpec())
    assert set(ds.y_train.tolist()) == set(ds.seen_labels)
    assert set(ds.y_test.tolist()) == set(range(30))
    assert set(ds.y_source.tolist()) == set(range(30))


def test_split_hops_consistent_with_taxonomy():
    ds = generate_synthetic(SyntheticSpec(seed=3))
    for c in ds.class_ids:
        assert ds.split.hop_of(c) == hop_distance(ds.taxonomy, c, ds.split.seen)


def test_noiseless_identity_domains_coincide():
    spec = SyntheticSpec(num_classes=12, seen_count=8, latent_dim=16, obs_dim=16, maps="identity",
                         domain_gap=0.0, noise_source=0.0, noise_target=0.0, ensure_all_hops=False)
    ds = generate_synthetic(spec)
    np.testing.assert_array_equal(ds.map_source, ds.map_target)
    centers = np.stack([ds.x_source[ds.y_source == k].mean(0) for k in range(12)])
    assert (nearest_center(ds.x_test, centers) == ds.y_test).all()


@pytest.mark.parametrize("seed", range(3))
def test_oracle_classifier_degrades_with_noise(seed):
    accs = []
    for sigma in (0.0, 0.5, 2.0, 8.0):
        ds = generate_synthetic(SyntheticSpec(noise_target=sigma, seed=seed))
        centers = ds.means @ ds.map_target.T
        unseen = np.isin(ds.y_test, ds.unseen_labels)
        pred = nearest_center(ds.x_test[unseen], centers)
        accs.append(float((pred == ds.y_test[unseen]).mean()))
    assert accs[0] == 1.0
    assert accs == sorted(accs, reverse=True)
    assert accs[-1] < 0.9


def test_deterministic():
    a, b = generate_synthetic(SyntheticSpec(seed=5)), generate_synthetic(SyntheticSpec(seed=5))
    for f in dataclasses.fields(a):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if isinstance(va, np.ndarray):
            np.testing.assert_array_equal(va, vb)
        else:
            assert va == vb
    assert not np.array_equal(generate_synthetic(SyntheticSpec(seed=6)).x_test, a.x_test)


@pytest.mark.parametrize("n", [50, 400, 3200])
def test_class_means_converge(n):
    sigma = 1.5
    spec = SyntheticSpec(num_classes=6, seen_count=4, noise_target=sigma, target_train_per_class=1,
                         target_test_per_class=n, ensure_all_hops=False, branching=(3, 2, 2), seed=1)
    ds = generate_synthetic(spec)
    for k in range(6):
        emp = ds.x_test[ds.y_test == k].mean(0)
        err = emp - ds.map_target @ ds.means[k]
        # root-mean-square error per coordinate against 3 sigma / sqrt(n)
        assert np.sqrt(np.mean(err ** 2)) <= 3 * sigma / np.sqrt(n)
        # and no single coordinate beyond 5 sigma / sqrt(n)
        assert np.abs(err).max() <= 5 * sigma / np.sqrt(n)


@pytest.mark.parametrize("bad", [
    {"num_classes": 1, "seen_count": 1},
    {"seen_count": 30},
    {"noise_source": -0.1},
    {"maps": "identity"},
    {"maps": "fancy"},
    {"source_per_class": 0},
    {"branching": (2, 2)},
])
def test_invalid_specs(bad):
    with pytest.raises(InvalidSpec):
        generate_synthetic(SyntheticSpec(**bad))


def test_spec_dict_round_trip():
    spec = SyntheticSpec(seed=9, branching=(4, 3, 2))
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(InvalidSpec):
        SyntheticSpec.from_dict({"nope": 1})


# -- manifests --------------------------------------------------------------------

@pytest.fixture
def written(tmp_path):
    ds = generate_synthetic(SyntheticSpec(num_classes=12, seen_count=8, branching=(3, 2, 2),
                                          ensure_all_hops=False, seed=2))
    return ds, write_synthetic(ds, tmp_path / "synth")


def test_written_dataset_loads(written):
    ds, path = written
    split = Split.load(path.parent / "split.json")
    m = load_manifest(path, classes=ds.class_ids, split=split)
    assert len(m.select("illustration")) == len(ds.y_source)
    assert len(m.select("photo", "train")) == len(ds.y_train)
    loader = VectorLoader(m)
    np.testing.assert_array_equal(loader.stack(m.select("photo", "test")), ds.x_test)


def test_manifest_round_trip(written, tmp_path):
    _, path = written
    m = load_manifest(path)
    m.save(tmp_path / "again.csv")
    again = load_manifest(tmp_path / "again.csv", check_paths=False)
    assert again.records == m.records
    assert (tmp_path / "again.csv").read_text() == path.read_text()


def test_unseen_photo_leak(written, tmp_path):
    ds, path = written
    unseen = sorted(ds.split.unseen)[0]
    m = load_manifest(path)
    m.records.append(ManifestRecord("photos_test.npy#0", unseen, "photo", "train"))
    m.save(path.parent / "leaky.csv")
    with pytest.raises(UnseenPhotoLeak):
        load_manifest(path.parent / "leaky.csv", split=ds.split)
    # the same photo tagged for testing is fine
    m.records[-1] = ManifestRecord("photos_test.npy#0", unseen, "photo", "test")
    m.save(path.parent / "ok.csv")
    load_manifest(path.parent / "ok.csv", split=ds.split)


def test_class_without_illustration(written):
    ds, path = written
    m = load_manifest(path)
    dropped = ds.class_ids[0]
    m.records = [r for r in m.records if not (r.domain == "illustration" and r.class_id == dropped)]
    m.save(path.parent / "m.csv")
    with pytest.raises(MissingSideInformation):
        load_manifest(path.parent / "m.csv", classes=ds.class_ids)


def test_missing_and_unknown(written, tmp_path):
    ds, path = written
    with pytest.raises(MissingFile):
        load_manifest(tmp_path / "absent.csv")
    m = Manifest([ManifestRecord("gone.npy", ds.class_ids[0], "illustration")], tmp_path)
    m.save(tmp_path / "m.csv")
    with pytest.raises(MissingFile):
        load_manifest(tmp_path / "m.csv")
    m = load_manifest(path)
    m.records.append(ManifestRecord("illustrations.npy#0", "not_a_class", "illustration"))
    m.save(path.parent / "u.csv")
    with pytest.raises(UnknownClass):
        load_manifest(path.parent / "u.csv", classes=ds.class_ids)


def test_image_adapter(tmp_path):
    Image = pytest.importorskip("PIL.Image")
    arr = (np.arange(32 * 32) % 256).astype(np.uint8).reshape(32, 32)
    Image.fromarray(arr).save(tmp_path / "a.png")
    m = Manifest([ManifestRecord("a.png", "x", "illustration")], tmp_path)
    v = VectorLoader(m, image_size=8).load(m.records[0])
    assert v.shape == (64,)
    assert 0.0 <= v.min() and v.max() <= 1.0
