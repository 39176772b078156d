import hashlib

import numpy as np
import pytest
from PIL import Image

from stseg.data import DatasetError, generate_desk_corpus, load_image, load_mvtec_layout, read_mask


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_desk_layout(desk_corpus):
    root, ds = desk_corpus
    assert len(ds.train_normals) == 20 and len(ds.test_items) == 20
    labels = [it.label for it in ds.test_items]
    assert sum(labels) == 10
    for it in ds.test_items:
        assert (it.mask_path is not None) == bool(it.label)
        if it.label:
            m = read_mask(it.mask_path)
            assert m.shape == (64, 64) and 0 < m.mean() < 0.5
    assert len(list((root / "sources").glob("*.png"))) == 12


def test_corpus_is_byte_reproducible(tmp_path):
    generate_desk_corpus(tmp_path / "a", seed=5, n_train=3, n_test=4, n_sources=2)
    generate_desk_corpus(tmp_path / "b", seed=5, n_train=3, n_test=4, n_sources=2)
    generate_desk_corpus(tmp_path / "c", seed=6, n_train=3, n_test=4, n_sources=2)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b") != _digest(tmp_path / "c")


def test_defects_follow_blend_off_mask(desk_corpus):
    root, ds = desk_corpus
    for it in ds.test_items:
        if not it.label:
            continue
        ref = np.asarray(Image.open(root / "reference" / "desk" / it.defect / it.path.name))
        img = np.asarray(Image.open(it.path))
        off = read_mask(it.mask_path) == 0
        assert np.array_equal(img[off], ref[off])
        assert not np.array_equal(img[~off], ref[~off])


def test_missing_mask_is_reported(tmp_path):
    generate_desk_corpus(tmp_path, seed=1, n_train=2, n_test=2, n_sources=1)
    next((tmp_path / "desk" / "ground_truth" / "defect").glob("*.png")).unlink()
    with pytest.raises(DatasetError, match="mask"):
        load_mvtec_layout(tmp_path, "desk")


def test_bad_layouts(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mvtec_layout(tmp_path, "none")
    generate_desk_corpus(tmp_path, seed=1, n_train=2, n_test=2, n_sources=1)
    (tmp_path / "desk" / "train" / "scratch").mkdir()
    with pytest.raises(DatasetError):
        load_mvtec_layout(tmp_path, "desk")


def test_load_image_resizes_and_converts(tmp_path):
    Image.fromarray(np.full((40, 30), 128, np.uint8)).save(tmp_path / "g.png")
    img = load_image(tmp_path / "g.png", 32)
    assert img.shape == (32, 32, 3) and img.dtype == np.float32
    assert np.allclose(img, 128 / 255)
