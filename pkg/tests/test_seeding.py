import numpy as np

from qahfl.seeding import derive_seed, seed_tree


def first64(*path):
    return int(seed_tree(7, *path).integers(0, 2**63, dtype=np.int64))


def test_same_path_same_stream():
    assert np.array_equal(seed_tree(1, "a", 2).random(5), seed_tree(1, "a", 2).random(5))


def test_order_and_grouping_matter():
    assert first64("a", "b") != first64("b", "a")
    assert first64("ab") != first64("a", "b")
    assert first64(1) != first64("1")


def test_master_seed_matters():
    assert derive_seed(1, "x") != derive_seed(2, "x")


def test_sibling_paths_do_not_collide():
    seen = {derive_seed(0, "client", i, "train") for i in range(10_000)}
    assert len(seen) == 10_000
    firsts = {first64("client", i) for i in range(2_000)}
    assert len(firsts) == 2_000


def test_adding_streams_does_not_shift_others():
    before = seed_tree(3, "round", 2, "client", 5).random(3)
    _ = [seed_tree(3, "round", 2, "client", k).random() for k in range(50)]
    assert np.array_equal(seed_tree(3, "round", 2, "client", 5).random(3), before)
