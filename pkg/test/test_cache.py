import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from truncgeo import cache
from truncgeo.cache import CellCache


def test_disabled_without_a_database():
    store = CellCache("coverage")
    assert not store.enabled()
    store.set({"n": 10}, {"estimate": 0.5})
    assert store.get({"n": 10}) is None


def test_round_trip(test_db):
    store = CellCache("coverage")
    identity = {"n": 10, "prior": "jeffreys", "grid": {"order": 8, "gamma_width": 40.0}}
    store.set(identity, {"estimate": np.float64(0.25), "covered": np.int64(3), "se": None})
    assert store.get(identity) == {"estimate": 0.25, "covered": 3, "se": None}


def test_key_ignores_dict_order(test_db):
    store = CellCache("moment")
    store.set({"b": 1, "a": {"y": 2, "x": 1}}, {"estimate": 1.0})
    assert store.get({"a": {"x": 1, "y": 2}, "b": 1}) == {"estimate": 1.0}


def test_kinds_are_separate(test_db):
    CellCache("coverage").set({"n": 10}, {"estimate": 1.0})
    assert CellCache("moment").get({"n": 10}) is None


def test_replace_on_conflict(test_db):
    store = CellCache("coverage")
    store.set({"n": 10}, {"estimate": 1.0})
    store.set({"n": 10}, {"estimate": 2.0})
    assert store.get({"n": 10}) == {"estimate": 2.0}


def test_concurrent_writes(test_db):
    store = CellCache("pivot_law")

    def write(i):
        store.set({"n": i}, {"estimate": float(i)})

    with ThreadPoolExecutor(max_workers=4) as executor:
        list(executor.map(write, range(20)))
    assert [store.get({"n": i})["estimate"] for i in range(20)] == [float(i) for i in range(20)]


def test_init_db_creates_the_file(tmp_path):
    path = str(tmp_path / "nested" / "cells.db")
    try:
        cache.init_db(path=path)
        assert os.path.exists(path)
        CellCache("coverage").set({"n": 1}, {"estimate": 0.0})
        assert CellCache("coverage").get({"n": 1}) == {"estimate": 0.0}
        cache.db.close()
        cache.init_db(remove_exists=True, path=path)
        assert CellCache("coverage").get({"n": 1}) is None
    finally:
        cache.db.close()
        cache.db.init(None)


def test_default_path_is_under_home(tmp_path):
    assert cache.cache_path().startswith(str(tmp_path))
