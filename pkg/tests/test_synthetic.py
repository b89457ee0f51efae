import numpy as np

from batterysort.dataset import ClassCatalog, load_corpus
from batterysort.synthetic import (
    ALL_COMBOS,
    SOURCE_COMBOS,
    TARGET_COMBOS,
    TARGET_ONLY_LOGOS,
    others_pool,
    render_set,
    target_class_names,
    toy_patches,
    write_corpus,
)


def test_source_and_target_disjoint():
    assert not set(SOURCE_COMBOS) & set(TARGET_COMBOS)
    assert set(SOURCE_COMBOS) == set(ALL_COMBOS) - set(TARGET_COMBOS)
    assert len(TARGET_COMBOS) == 9 == len(set(target_class_names()))
    assert not {c.logo for c in SOURCE_COMBOS} & set(TARGET_ONLY_LOGOS)


def test_render_is_seeded():
    a, la = render_set(TARGET_COMBOS[:2], 2, seed=4)
    b, lb = render_set(TARGET_COMBOS[:2], 2, seed=4)
    assert a.shape == (4, 244, 244, 3) and a.dtype == np.uint8
    np.testing.assert_array_equal(a, b)
    assert la.tolist() == lb.tolist() == [0, 0, 1, 1]
    assert not np.array_equal(a[0], a[1])


def test_others_pool_shape():
    assert others_pool(3, seed=1).shape == (3, 244, 244, 3)


def test_toy_patches():
    images, labels = toy_patches()
    assert images.shape == (450, 64, 64, 3)
    assert np.bincount(labels).tolist() == [50] * 9
    means = np.array([images[labels == k].reshape(-1, 3).mean(0) for k in range(9)])
    assert len({tuple(np.round(m, -1)) for m in means}) == 9


def test_write_corpus_loads_back(tmp_path):
    images, labels = toy_patches(n_per_class=2, size=8)
    names = [f"k{i}" for i in range(9)]
    write_corpus(tmp_path, images, labels, names, others=images[:2])
    corpus = load_corpus(tmp_path, ClassCatalog.from_directory(tmp_path))
    assert len(corpus.known()) == 18 and len(corpus.others()) == 2
