from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dacl.bank import MAGIC, BankSet, ClassMemoryBank
from dacl.density import ClassEmbedding
from dacl.errors import ContractError

from conftest import unit_rows


def item(seq, cls=0, dim=3, density=0.5, rng=None):
    v = np.ones(dim) / np.sqrt(dim) if rng is None else unit_rows(rng, 1, dim)[0]
    return ClassEmbedding(v, cls, density, seq_id=seq)


def test_capacity_three_keeps_last_three():
    bank = ClassMemoryBank(0, 3, 3)
    bank.push([item(i) for i in range(5)])
    assert bank.arrays()[2].tolist() == [2, 3, 4]
    assert len(bank) == 3


def test_push_orders_by_seq_id():
    bank = ClassMemoryBank(0, 5, 3)
    bank.push([item(4), item(1), item(3)])
    assert bank.arrays()[2].tolist() == [1, 3, 4]


def test_push_validation():
    bank = ClassMemoryBank(0, 5, 3)
    with pytest.raises(ContractError):
        bank.push([item(0, cls=1)])
    with pytest.raises(ContractError):
        bank.push([ClassEmbedding(np.ones(3) / np.sqrt(3), 0, None, seq_id=0)])
    with pytest.raises(ContractError):
        ClassMemoryBank(0, 0, 3)


def test_densities_are_frozen_at_push():
    bank = ClassMemoryBank(0, 4, 3)
    e = item(0, density=0.25)
    bank.push([e])
    e.density = 0.9
    assert bank.arrays()[1].tolist() == [0.25]


def test_snapshot_entries_are_read_only():
    bank = ClassMemoryBank(0, 4, 3)
    bank.push([item(0)])
    snap = bank.snapshot()
    with pytest.raises(ValueError):
        snap[0].vector[0] = 1.0


@pytest.mark.parametrize("capacity", [1, 7, 100])
def test_fifo_matches_sliding_window(capacity):
    r = np.random.default_rng(capacity)
    bank = ClassMemoryBank(0, capacity, 2)
    window = deque(maxlen=capacity)
    seq = 0
    for _ in range(300):
        batch = []
        for _ in range(int(r.integers(0, 6))):
            e = item(seq, dim=2, density=float(r.random()), rng=r)
            batch.append(e)
            window.append((seq, e.density, tuple(e.vector)))
            seq += 1
        bank.push(batch)
        vecs, dens, ids = bank.arrays()
        assert list(zip(ids.tolist(), dens.tolist(), map(tuple, vecs.tolist()))) == list(window)


@given(st.lists(st.integers(0, 5), max_size=30), st.integers(1, 9))
def test_size_never_exceeds_capacity(batches, capacity):
    bank = ClassMemoryBank(0, capacity, 3)
    seq = 0
    total = 0
    for n in batches:
        bank.push([item(seq + i) for i in range(n)])
        seq += n
        total += n
        assert len(bank) == min(total, capacity)


def test_dump_and_load_round_trip(tmp_path, rng):
    banks = BankSet(3, 4, 5)
    seq = 0
    for c in range(3):
        for _ in range(c * 3):
            banks[c].push([item(seq, cls=c, dim=5, density=float(rng.random()), rng=rng)])
            seq += 1
    path = tmp_path / "bank.bin"
    banks.dump(path)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    loaded = BankSet.load(path)
    for c in range(3):
        for a, b in zip(banks[c].arrays(), loaded[c].arrays()):
            np.testing.assert_array_equal(a, b)
    assert banks.fill() == loaded.fill()
