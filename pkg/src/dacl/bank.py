"""Per-class fixed-capacity FIFO memory of (embedding, density) pairs."""

from __future__ import annotations

import struct

import numpy as np

from .density import ClassEmbedding, Origin
from .errors import ContractError

MAGIC = b"DACLBANK"
VERSION = 1


class ClassMemoryBank:
    """Ring buffer of detached prototypes for one class.

    Densities are stamped at push time and never recomputed.
    """

    def __init__(self, class_id, capacity, dim):
        if capacity < 1:
            raise ContractError(f"bank capacity must be >= 1, got {capacity}")
        self.class_id = int(class_id)
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._vecs = np.zeros((self.capacity, self.dim))
        self._dens = np.zeros(self.capacity)
        self._ids = np.zeros(self.capacity, dtype=np.int64)
        self._scenes = np.full(self.capacity, -1, dtype=np.int64)
        self.write_cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, items):
        """Append embeddings (with densities set) in seq_id order."""
        items = sorted(items, key=lambda e: e.seq_id)
        for e in items:
            if e.class_id != self.class_id:
                raise ContractError(f"embedding of class {e.class_id} pushed into bank {self.class_id}")
            if e.density is None:
                raise ContractError(f"embedding {e.seq_id} has no density stamp")
            if e.vector.shape != (self.dim,):
                raise ContractError(f"embedding dim {e.vector.shape} != bank dim {self.dim}")
        for e in items:
            c = self.write_cursor
            self._vecs[c] = e.vector
            self._dens[c] = e.density
            self._ids[c] = e.seq_id
            self._scenes[c] = -1 if e.scene_id is None else e.scene_id
            self.write_cursor = (c + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def _order(self):
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.write_cursor) % self.capacity

    def arrays(self):
        """Copies of (vectors, densities, seq_ids), oldest first."""
        o = self._order()
        return self._vecs[o].copy(), self._dens[o].copy(), self._ids[o].copy()

    def snapshot(self):
        o = self._order()
        out = []
        for i in o:
            vec = self._vecs[i].copy()
            vec.flags.writeable = False
            sid = int(self._scenes[i])
            out.append(ClassEmbedding(vec, self.class_id, float(self._dens[i]), Origin.BANK,
                                      int(self._ids[i]), None if sid < 0 else sid))
        return tuple(out)


def union_pool(bank_snapshot, batch_embeddings):
    """Bank entries followed by the batch entries of the same class."""
    classes = {e.class_id for e in bank_snapshot} | {e.class_id for e in batch_embeddings}
    if len(classes) > 1:
        raise ContractError(f"union_pool mixes classes {sorted(classes)}")
    return list(bank_snapshot) + list(batch_embeddings)


class BankSet:
    def __init__(self, n_classes, capacity, dim):
        self.banks = [ClassMemoryBank(n, capacity, dim) for n in range(n_classes)]
        self.capacity = capacity
        self.dim = dim

    def __getitem__(self, class_id):
        return self.banks[class_id]

    def __len__(self):
        return len(self.banks)

    def fill(self):
        return [len(b) for b in self.banks]

    def dump(self, path):
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IIII", VERSION, len(self.banks), self.capacity, self.dim))
            for bank in self.banks:
                vecs, dens, ids = bank.arrays()
                fh.write(struct.pack("<I", len(ids)))
                for v, d, i in zip(vecs, dens, ids):
                    fh.write(struct.pack("<Qd", int(i), float(d)))
                    fh.write(v.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            buf = fh.read()
        if buf[:8] != MAGIC:
            raise ContractError(f"{path}: not a bank file")
        version, n, cap, dim = struct.unpack_from("<IIII", buf, 8)
        if version != VERSION:
            raise ContractError(f"{path}: unsupported bank version {version}")
        out = cls(n, cap, dim)
        off = 24
        for bank in out.banks:
            (count,) = struct.unpack_from("<I", buf, off)
            off += 4
            items = []
            for _ in range(count):
                sid, dens = struct.unpack_from("<Qd", buf, off)
                off += 16
                vec = np.frombuffer(buf, dtype="<f8", count=dim, offset=off).astype(np.float64)
                off += 8 * dim
                items.append(ClassEmbedding(vec, bank.class_id, dens, Origin.BANK, sid))
            bank.push(items)
        return out
