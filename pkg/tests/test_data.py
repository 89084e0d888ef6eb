import numpy as np
import pytest

from expnet.data import (GLYPH_SIZE, MAX_GLYPHS, DatasetError, SyntheticSpec, directory_digest,
                         generate_synthetic_dataset, glyph_library, interaction_factors,
                         load_dataset, mask_glyphs, render_dataset, split_dataset)
from expnet.model import ConfigError, ModelConfig
from expnet.train import TrainConfig, evaluate, train


def small(regime="detail", **kw):
    base = dict(regime=regime, num_classes=4, per_class=5, image_size=32, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


@pytest.mark.parametrize("regime", ["detail", "structure", "interaction"])
def test_same_seed_byte_identical(tmp_path, regime):
    generate_synthetic_dataset(small(regime), tmp_path / "a")
    generate_synthetic_dataset(small(regime), tmp_path / "b")
    assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")
    generate_synthetic_dataset(small(regime, seed=4), tmp_path / "c")
    assert directory_digest(tmp_path / "a") != directory_digest(tmp_path / "c")


def test_counts_are_balanced():
    data = render_dataset(SyntheticSpec(num_classes=4, per_class=100, image_size=32))
    assert len(data) == 400
    assert np.bincount(data.labels).tolist() == [100] * 4


def test_detail_has_one_glyph_box_each():
    data = render_dataset(small())
    assert data.boxes.shape == (20, 4)
    assert np.all(data.boxes[:, 2] - data.boxes[:, 0] == GLYPH_SIZE)
    assert np.all(data.boxes[:, 3] - data.boxes[:, 1] == GLYPH_SIZE)
    assert np.all(data.boxes >= 0) and np.all(data.boxes <= 32)


def test_detail_glyph_determines_class():
    spec = small(noise=0.0)
    data = render_dataset(spec)
    glyphs = glyph_library(4, _rng_after_labels(spec))
    for img, y, (x0, y0, x1, y1) in zip(data.images, data.labels, data.boxes):
        patch = img[y0:y1, x0:x1, 0] > 0
        assert np.array_equal(patch, glyphs[y])


def _rng_after_labels(spec):
    rng = np.random.default_rng(spec.seed)
    rng.permutation(spec.num_classes * spec.per_class)
    return rng


def test_glyphs_are_distinct():
    g = glyph_library(MAX_GLYPHS, np.random.default_rng(0))
    for i in range(len(g)):
        for j in range(i):
            assert np.sum(g[i] != g[j]) >= 12


def test_too_many_classes_rejected():
    with pytest.raises(DatasetError, match="glyphs"):
        render_dataset(small(num_classes=MAX_GLYPHS + 1, per_class=1))


def test_interaction_needs_composite_k():
    assert interaction_factors(4) == (2, 2)
    assert interaction_factors(6) == (2, 3)
    with pytest.raises(DatasetError):
        interaction_factors(5)


def test_interaction_neither_cue_alone():
    """Each glyph appears under two classes and each texture family under two."""
    data = render_dataset(small("interaction", per_class=3))
    families, n_glyphs = interaction_factors(4)
    fam = data.labels // n_glyphs
    gly = data.labels % n_glyphs
    for f in range(families):
        assert len(set(data.labels[fam == f])) == n_glyphs
    for g in range(n_glyphs):
        assert len(set(data.labels[gly == g])) == families


def test_structure_masks_nested():
    data = render_dataset(small("structure"))
    outer, inner = data.masks[..., 0], data.masks[..., 1]
    assert np.all(inner <= outer)
    ratios = np.sqrt(inner.sum(axis=(1, 2)) / outer.sum(axis=(1, 2)))
    for y in range(4):
        r = ratios[data.labels == y]
        assert np.all((r > 0.3 + 0.15 * y - 0.03) & (r < 0.3 + 0.15 * (y + 1) + 0.03))


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(num_classes=1)
    with pytest.raises(ConfigError):
        SyntheticSpec(regime="weather")
    with pytest.raises(ConfigError):
        SyntheticSpec.from_text("regime=detail\nlabels=4\n")


def test_spec_text_roundtrip():
    spec = small("structure", noise=0.25)
    assert SyntheticSpec.from_text(spec.to_text()) == spec


# disk round trip ---------------------------------------------------------------------


@pytest.mark.parametrize("regime", ["detail", "structure"])
def test_generate_load_roundtrip(tmp_path, regime):
    data = generate_synthetic_dataset(small(regime), tmp_path)
    back = load_dataset(tmp_path)
    assert np.array_equal(back.images, data.images)
    assert np.array_equal(back.labels, data.labels)
    assert (back.regime, back.num_classes, back.seed) == (regime, 4, 3)
    if regime == "detail":
        assert np.array_equal(back.boxes, data.boxes)
    else:
        assert np.array_equal(back.masks, data.masks)


def test_empty_directory_no_manifest(tmp_path):
    with pytest.raises(DatasetError, match="no manifest"):
        load_dataset(tmp_path)


def test_missing_label_names_image(tmp_path):
    generate_synthetic_dataset(small(), tmp_path)
    manifest = tmp_path / "manifest.txt"
    lines = manifest.read_text().splitlines()
    idx = next(i for i, line in enumerate(lines) if line.startswith("images/000003"))
    lines[idx] = lines[idx].split()[0]
    manifest.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="images/000003.expt"):
        load_dataset(tmp_path)


def test_missing_file_named(tmp_path):
    generate_synthetic_dataset(small(), tmp_path)
    (tmp_path / "images" / "000007.expt").unlink()
    with pytest.raises(DatasetError, match="000007.expt"):
        load_dataset(tmp_path)


def test_checksum_failure_named(tmp_path):
    generate_synthetic_dataset(small(), tmp_path)
    path = tmp_path / "images" / "000002.expt"
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(DatasetError, match="000002.expt: checksum failure"):
        load_dataset(tmp_path)


def test_count_mismatch_rejected(tmp_path):
    generate_synthetic_dataset(small(), tmp_path)
    manifest = tmp_path / "manifest.txt"
    manifest.write_text(manifest.read_text().replace("count=20", "count=21"))
    with pytest.raises(DatasetError, match="count"):
        load_dataset(tmp_path)


def test_split_is_seeded_partition():
    data = render_dataset(small(per_class=10))
    a, b = split_dataset(data, seed=5)
    assert (len(a), len(b)) == (32, 8)
    a2, _ = split_dataset(data, seed=5)
    assert np.array_equal(a.images, a2.images)
    ids = lambda d: {img.tobytes() for img in d.images}
    assert not ids(a) & ids(b)


# glyph-masked control ------------------------------------------------------------------


def test_masked_glyph_box_is_background():
    spec = small(noise=0.0)
    data = render_dataset(spec)
    masked = mask_glyphs(data, spec)
    # with no noise every masked image equals the shared background
    assert np.all(masked.images == masked.images[0])


def test_glyph_masked_control_scores_chance():
    spec = SyntheticSpec(regime="detail", num_classes=4, per_class=100, image_size=32, seed=9)
    masked = mask_glyphs(render_dataset(spec), spec)
    tr, te = split_dataset(masked, seed=9)
    cfg = ModelConfig(image_size=32, widths=(4, 8, 16, 32), hidden=16, fusion_width=16)
    result = train(cfg, TrainConfig(epochs=4, seed=9), tr)
    acc = evaluate(result.model, te).accuracy
    assert abs(acc - 0.25) <= 0.1
