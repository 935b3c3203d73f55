import numpy as np
import pytest

from laminet.augment import CropBox, apply_crop
from laminet.errors import ConfigError, DataError, FormatError
from laminet.phantom import (Anatomy, ClassAnatomy, DatasetManifest,
                             PhantomParams, ScanRecord, _sample_anatomy,
                             ablate_rnfl, anatomy_onh_box, downsample,
                             generate, lc_neutral, load_split, manifest_load,
                             manifest_save, octant_signal_set, read_volume,
                             split_by_patient, synthesize, write_volume)


@pytest.fixture
def params():
    return PhantomParams(seed=5)


@pytest.fixture
def small_set(params, tmp_path):
    return generate(params, n_patients=8, out_dir=tmp_path), tmp_path


def first_anatomy(manifest):
    return manifest.records[0].anatomy


# ---------------------------------------------------------------------------
# Parameter validation


def test_params_reject_small_extents():
    with pytest.raises(ConfigError):
        PhantomParams(shape=(8, 12, 12))


def test_params_reject_zero_effect():
    flat = ClassAnatomy(band_thickness=(5.0, 0.5), band_top=(3.0, 0.4),
                        cup_radius=(3.5, 0.5), cup_depth=(0.5, 0.08),
                        lc_contrast=(0.1, 0.02))
    with pytest.raises(ConfigError):
        PhantomParams(normal=flat, glaucoma=flat)


def test_params_reject_bad_balance():
    with pytest.raises(ConfigError):
        PhantomParams(class_balance=0.0)


def test_lc_neutral_keeps_band_effect(params):
    p = lc_neutral(params)
    assert p.glaucoma.lc_contrast == p.normal.lc_contrast
    assert p.glaucoma.lc_shift == p.normal.lc_shift
    assert p.glaucoma.band_thickness != p.normal.band_thickness


# ---------------------------------------------------------------------------
# Anatomy sampling


def test_thickness_effect_size_matches_config(params):
    rng = np.random.default_rng(0)
    thick_n = [_sample_anatomy(params.normal, params, rng, "L").band_thickness
               for _ in range(500)]
    thick_g = [_sample_anatomy(params.glaucoma, params, rng, "L").band_thickness
               for _ in range(500)]
    want = params.normal.band_thickness[0] - params.glaucoma.band_thickness[0]
    got = np.mean(thick_n) - np.mean(thick_g)
    assert abs(got - want) <= 0.05 * want


def test_lc_box_always_in_bounds(params):
    rng = np.random.default_rng(1)
    d, h, w = params.shape
    for _ in range(200):
        for cls in (params.normal, params.glaucoma):
            a = _sample_anatomy(cls, params, rng, "R")
            a.lc_box.check_within((d, h, w))
            assert a.lc_box.shape() == params.lc_box_size


def test_glaucoma_lc_box_sits_deeper(params):
    rng = np.random.default_rng(2)
    zn = _sample_anatomy(params.normal, params, rng, "L").lc_box.z[0]
    zg = _sample_anatomy(params.glaucoma, params, rng, "L").lc_box.z[0]
    assert zg == zn + 1


def test_anatomy_dict_roundtrip(params):
    rng = np.random.default_rng(3)
    a = _sample_anatomy(params.normal, params, rng, "L")
    assert Anatomy.from_dict(a.to_dict()) == a


# ---------------------------------------------------------------------------
# Synthesis


def test_band_is_bright_and_cup_is_dark(params):
    rng = np.random.default_rng(4)
    a = _sample_anatomy(params.normal, params, rng, "L")
    v = synthesize(a, params, rng)
    assert v.dtype == np.float32
    z = int(a.band_top + a.band_thickness / 2)
    cy, cx = (int(c) for c in a.cup_center)
    rim_y = int(np.clip(cy + 3 * a.cup_radius, 0, params.shape[1] - 1))
    assert v[z, rim_y, cx] > params.background + 0.3
    assert v[z, cy, cx] < v[z, rim_y, cx] - 0.15


def test_enface_centroid_tracks_cup(params):
    rng = np.random.default_rng(5)
    a = _sample_anatomy(params.normal, params, rng, "L")
    v = synthesize(a, params, rng)
    from laminet.augment import heuristic_onh_box
    box = heuristic_onh_box(v)
    cy, cx = a.cup_center
    assert box.y[0] <= cy <= box.y[1]
    assert box.x[0] <= cx <= box.x[1]


def test_lc_texture_variance_scales_with_contrast(params):
    rng1 = np.random.default_rng(6)
    a = _sample_anatomy(params.normal, params, rng1, "L")
    strong = Anatomy(band_top=a.band_top, band_thickness=a.band_thickness,
                     cup_center=a.cup_center, cup_radius=a.cup_radius,
                     cup_depth=a.cup_depth, lc_box=a.lc_box,
                     lc_contrast=a.lc_contrast + 0.3)
    v_lo = synthesize(a, params, np.random.default_rng(7))
    v_hi = synthesize(strong, params, np.random.default_rng(7))
    sl = a.lc_box.slices()
    assert v_hi[sl].std() > v_lo[sl].std() + 0.1


def test_anatomy_onh_box_posterior_and_centred(params):
    rng = np.random.default_rng(8)
    a = _sample_anatomy(params.normal, params, rng, "R")
    box = anatomy_onh_box(a, params.shape)
    d, h, w = params.shape
    assert box.z == (d // 2, d)
    assert box.y[0] <= a.cup_center[0] <= box.y[1]
    assert box.x[0] <= a.cup_center[1] <= box.x[1]
    box.check_within(params.shape)
    # The LC box lives inside the posterior crop.
    a.lc_box.check_within(params.shape)
    assert a.lc_box.z[0] >= box.z[0]


# ---------------------------------------------------------------------------
# Dataset generation


def test_generate_is_deterministic(params, tmp_path):
    m1 = generate(params, 6, tmp_path / "a")
    m2 = generate(params, 6, tmp_path / "b")
    assert [r.to_dict() for r in m1.records] == [r.to_dict() for r in m2.records]
    for r in m1.records:
        b1 = (tmp_path / "a" / r.path).read_bytes()
        b2 = (tmp_path / "b" / r.path).read_bytes()
        assert b1 == b2
    t1 = (tmp_path / "a" / "manifest.jsonl").read_bytes()
    t2 = (tmp_path / "b" / "manifest.jsonl").read_bytes()
    assert t1 == t2


def test_generate_seed_changes_content(params, tmp_path):
    m1 = generate(params, 4, tmp_path / "a")
    m2 = generate(PhantomParams(seed=params.seed + 1), 4, tmp_path / "b")
    b1 = (tmp_path / "a" / m1.records[0].path).read_bytes()
    b2 = (tmp_path / "b" / m2.records[0].path).read_bytes()
    assert b1 != b2


def test_generate_labels_are_patient_level(small_set):
    manifest, _ = small_set
    by_patient = {}
    for r in manifest.records:
        by_patient.setdefault(r.patient, set()).add(r.label)
    assert all(len(s) == 1 for s in by_patient.values())


def test_generate_scan_counts_within_ranges(small_set):
    manifest, _ = small_set
    per_patient = {}
    for r in manifest.records:
        per_patient.setdefault(r.patient, set()).add((r.eye, r.scan_id))
    for scans in per_patient.values():
        eyes = {e for e, _ in scans}
        assert 1 <= len(eyes) <= 2
        assert 1 <= len(scans) <= 4


def test_generate_rejects_zero_patients(params, tmp_path):
    with pytest.raises(ConfigError):
        generate(params, 0, tmp_path)


def test_generated_volumes_readable(small_set, params):
    manifest, base = small_set
    v = read_volume(base / manifest.records[0].path)
    assert v.shape == params.shape
    assert np.isfinite(v).all()


def test_class_balance_roughly_holds(tmp_path):
    manifest = generate(PhantomParams(seed=9), 60, tmp_path)
    labels = {r.patient: r.label for r in manifest.records}
    frac = np.mean(list(labels.values()))
    assert 0.3 < frac < 0.7


# ---------------------------------------------------------------------------
# Band ablation


def test_ablate_full_band_removes_contrast(params):
    rng = np.random.default_rng(10)
    a = _sample_anatomy(params.normal, params, rng, "L")
    v = synthesize(a, params, rng)
    rec = ScanRecord(patient="p0", eye="L", scan_id="s0", path="x", label=0,
                     anatomy=a)
    out = ablate_rnfl(v, rec, 1.0)
    z0, z1 = int(a.band_top), int(np.ceil(a.band_top + a.band_thickness))
    mask = np.ones(v.shape, bool)
    mask[a.lc_box.slices()] = False
    band_after = out[z0:z1][mask[z0:z1]]
    ref = v[:max(1, z0)]
    # Two-sample check: ablated band voxels look like background.
    assert abs(band_after.mean() - ref.mean()) < 3 * ref.std()
    assert v[z0:z1][mask[z0:z1]].mean() - band_after.mean() > 0.2


def test_ablate_preserves_lc_box_bitwise(params):
    rng = np.random.default_rng(11)
    a = _sample_anatomy(params.glaucoma, params, rng, "L")
    v = synthesize(a, params, rng)
    rec = ScanRecord(patient="p0", eye="L", scan_id="s0", path="x", label=1,
                     anatomy=a)
    out = ablate_rnfl(v, rec, 0.75)
    sl = a.lc_box.slices()
    assert np.array_equal(out[sl], v[sl])


def test_ablate_zero_fraction_is_identity(params):
    rng = np.random.default_rng(12)
    a = _sample_anatomy(params.normal, params, rng, "L")
    v = synthesize(a, params, rng)
    rec = ScanRecord(patient="p0", eye="L", scan_id="s0", path="x", label=0,
                     anatomy=a)
    out = ablate_rnfl(v, rec, 0.0)
    assert np.array_equal(out, v)
    assert out is not v


def test_ablate_requires_anatomy():
    rec = ScanRecord(patient="p0", eye="L", scan_id="s0", path="x", label=0)
    with pytest.raises(DataError):
        ablate_rnfl(np.zeros((16, 32, 32), np.float32), rec, 0.5)


def test_ablate_rejects_bad_fraction(params):
    rng = np.random.default_rng(13)
    a = _sample_anatomy(params.normal, params, rng, "L")
    rec = ScanRecord(patient="p0", eye="L", scan_id="s0", path="x", label=0,
                     anatomy=a)
    with pytest.raises(ConfigError):
        ablate_rnfl(np.zeros(params.shape, np.float32), rec, 1.5)


def test_ablate_is_deterministic(params):
    rng = np.random.default_rng(14)
    a = _sample_anatomy(params.normal, params, rng, "L")
    v = synthesize(a, params, rng)
    rec = ScanRecord(patient="p0", eye="L", scan_id="s0", path="x", label=0,
                     anatomy=a)
    assert np.array_equal(ablate_rnfl(v, rec, 0.5, seed=3),
                          ablate_rnfl(v, rec, 0.5, seed=3))


# ---------------------------------------------------------------------------
# Splits


def make_single_scan_manifest(n):
    recs = [ScanRecord(patient=f"p{i}", eye="L", scan_id=f"s{i}", label=i % 2,
                       path=f"s{i}.octv") for i in range(n)]
    return DatasetManifest(recs)


def test_split_ten_single_scan_patients():
    split = split_by_patient(make_single_scan_manifest(10), (0.6, 0.2, 0.2), seed=0)
    counts = {name: len(split.split(name)) for name in ("train", "val", "test")}
    assert counts == {"train": 6, "val": 2, "test": 2}


def test_split_keeps_patients_together(small_set):
    manifest, _ = small_set
    split = split_by_patient(manifest, (0.5, 0.25, 0.25), seed=1)
    seen = {}
    for r in split.records:
        assert r.split in ("train", "val", "test")
        seen.setdefault(r.patient, set()).add(r.split)
    assert all(len(s) == 1 for s in seen.values())


def test_split_deterministic(small_set):
    manifest, _ = small_set
    s1 = split_by_patient(manifest, seed=7)
    s2 = split_by_patient(manifest, seed=7)
    assert [r.split for r in s1.records] == [r.split for r in s2.records]


def test_split_seed_changes_assignment():
    m = make_single_scan_manifest(30)
    s1 = split_by_patient(m, seed=0)
    s2 = split_by_patient(m, seed=1)
    assert [r.split for r in s1.records] != [r.split for r in s2.records]


def test_split_too_few_patients():
    with pytest.raises(DataError):
        split_by_patient(make_single_scan_manifest(2), (0.6, 0.2, 0.2))


def test_split_bad_fractions():
    with pytest.raises(ConfigError):
        split_by_patient(make_single_scan_manifest(10), (0.6, 0.2, 0.1))


# ---------------------------------------------------------------------------
# Manifest I/O and validation


def test_manifest_roundtrip(small_set, tmp_path):
    manifest, _ = small_set
    split = split_by_patient(manifest, seed=0)
    split.records[0].crop_box = CropBox(z=(8, 16), y=(10, 20), x=(10, 20))
    p = tmp_path / "m.jsonl"
    manifest_save(split, p)
    back = manifest_load(p)
    assert [r.to_dict() for r in back.records] == [r.to_dict() for r in split.records]
    assert back.records[0].crop_box == CropBox(z=(8, 16), y=(10, 20), x=(10, 20))


def test_manifest_label_names_on_disk(small_set, tmp_path):
    manifest, _ = small_set
    p = tmp_path / "m.jsonl"
    manifest_save(manifest, p)
    text = p.read_text()
    assert '"TrueNormal"' in text or '"TrueGlaucoma"' in text
    assert '"label": 0' not in text


def test_manifest_duplicate_ids_rejected():
    recs = [ScanRecord(patient="p0", eye="L", scan_id="s0", label=0, path="a"),
            ScanRecord(patient="p1", eye="L", scan_id="s0", label=1, path="b")]
    with pytest.raises(DataError):
        DatasetManifest(recs)


def test_manifest_patient_in_two_splits_rejected():
    recs = [ScanRecord(patient="p0", eye="L", scan_id="s0", label=0, path="a",
                       split="train"),
            ScanRecord(patient="p0", eye="R", scan_id="s1", label=0, path="b",
                       split="test")]
    with pytest.raises(DataError):
        DatasetManifest(recs)


def test_manifest_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"patient": "p0"}\n')
    with pytest.raises(FormatError):
        manifest_load(p)


def test_record_rejects_bad_label():
    with pytest.raises(DataError):
        ScanRecord(patient="p0", eye="L", scan_id="s0", label=2, path="a")


# ---------------------------------------------------------------------------
# Volume file format


def test_volume_roundtrip(tmp_path):
    v = np.random.default_rng(0).normal(size=(4, 5, 6)).astype(np.float32)
    p = tmp_path / "v.octv"
    write_volume(p, v)
    assert np.array_equal(read_volume(p), v)


def test_volume_header_layout(tmp_path):
    v = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    p = tmp_path / "v.octv"
    write_volume(p, v)
    raw = p.read_bytes()
    assert raw[:4] == b"OCTV"
    assert raw[4:6] == (1).to_bytes(2, "little")
    assert raw[6:10] == (2).to_bytes(4, "little")
    assert raw[10:14] == (3).to_bytes(4, "little")
    assert raw[14:18] == (4).to_bytes(4, "little")
    # W varies fastest: the second stored value is v[0, 0, 1].
    second = np.frombuffer(raw, "<f4", count=2, offset=18)[1]
    assert second == v[0, 0, 1]


def test_volume_truncation_fuzz(tmp_path):
    v = np.random.default_rng(1).normal(size=(3, 4, 5)).astype(np.float32)
    p = tmp_path / "v.octv"
    write_volume(p, v)
    raw = p.read_bytes()
    bad = tmp_path / "bad.octv"
    for cut in range(0, len(raw), 7):
        bad.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            read_volume(bad)


def test_volume_trailing_bytes_rejected(tmp_path):
    v = np.zeros((2, 2, 2), np.float32)
    p = tmp_path / "v.octv"
    write_volume(p, v)
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        read_volume(p)


def test_volume_bad_magic_rejected(tmp_path):
    p = tmp_path / "v.octv"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError):
        read_volume(p)


# ---------------------------------------------------------------------------
# Downsampling


def test_downsample_hand_case():
    v = np.array([1.0, 3.0, 5.0, 7.0]).reshape(1, 1, 4)
    out = downsample(v, (1, 1, 2))
    assert np.array_equal(out, np.array([[[2.0, 6.0]]]))


def test_downsample_identity():
    v = np.random.default_rng(2).normal(size=(3, 4, 5))
    assert np.array_equal(downsample(v, (1, 1, 1)), v)


def test_downsample_drops_remainder():
    v = np.arange(5, dtype=np.float64).reshape(1, 1, 5)
    out = downsample(v, (1, 1, 2))
    assert out.shape == (1, 1, 2)
    assert np.array_equal(out[0, 0], [0.5, 2.5])


def test_downsample_rejects_bad_factor():
    with pytest.raises(ConfigError):
        downsample(np.zeros((4, 4, 4)), (0, 1, 1))


def test_downsample_rejects_oversize_factor():
    with pytest.raises(ConfigError):
        downsample(np.zeros((4, 4, 4)), (8, 1, 1))


def test_downsample_block_mean_matches_loop():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(6, 9, 8))
    out = downsample(v, (2, 3, 4))
    for i in range(3):
        for j in range(3):
            for k in range(2):
                block = v[2 * i:2 * i + 2, 3 * j:3 * j + 3, 4 * k:4 * k + 4]
                assert out[i, j, k] == pytest.approx(block.mean(), rel=1e-12)


# ---------------------------------------------------------------------------
# Split loading


def test_load_split(small_set):
    manifest, base = small_set
    split = split_by_patient(manifest, (0.5, 0.25, 0.25), seed=2)
    train = load_split(split, "train", base)
    want = split.split("train")
    assert train.volumes.shape[0] == len(want)
    assert list(train.labels) == [r.label for r in want]
    assert train.patients == tuple(r.patient for r in want)


def test_load_split_missing_file(small_set, tmp_path):
    manifest, base = small_set
    split = split_by_patient(manifest, (0.5, 0.25, 0.25), seed=2)
    with pytest.raises(DataError):
        load_split(split, "train", tmp_path / "elsewhere")


def test_load_split_empty(small_set):
    manifest, base = small_set
    out = load_split(manifest, "nosuch", base)
    assert out.volumes.shape[0] == 0


# ---------------------------------------------------------------------------
# Planted-signal volumes


def test_octant_signal_set_basic():
    s = octant_signal_set(5, shape=(16, 32, 32), octant=(1, 0, 1), seed=0)
    assert s.volumes.shape == (10, 16, 32, 32)
    assert sorted(s.labels.tolist()) == [0] * 5 + [1] * 5
    pos = s.volumes[s.labels == 1]
    # Signal mass concentrates in the requested octant.
    octant_mean = pos[:, 8:, :16, 16:].mean()
    rest_mean = pos[:, :8, :16, :16].mean()
    assert octant_mean > rest_mean + 0.03


def test_octant_signal_set_deterministic():
    a = octant_signal_set(3, seed=4)
    b = octant_signal_set(3, seed=4)
    assert np.array_equal(a.volumes, b.volumes)


def test_cropped_phantom_keeps_lc(params):
    rng = np.random.default_rng(20)
    a = _sample_anatomy(params.glaucoma, params, rng, "L")
    v = synthesize(a, params, rng)
    box = anatomy_onh_box(a, params.shape)
    cropped = apply_crop(v, box)
    sl = a.lc_box.slices()
    assert np.array_equal(cropped[sl], v[sl])
