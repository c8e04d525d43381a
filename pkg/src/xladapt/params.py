"""Named, partitioned parameter store with freeze semantics and checkpoints.

Every parameter belongs to exactly one partition (``backbone``, ``head:<lang>``,
``adapter:<lang>``, ``fusion``, ...). Optimizers only ever see tensors from
unfrozen partitions, which is what makes the bitwise freeze audits in the test
suite possible.

Checkpoints are a flat binary container: magic, little-endian header length, a
JSON index (sorted by name), then concatenated float64 little-endian payloads.
Round-trips are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np

from .autodiff import Tensor

_MAGIC = b"XLADAPT1"


class ParamPartition:
    """Shape-level partition table; usable without allocating tensors."""

    def __init__(self):
        self._entries = {}  # name -> (partition, shape)

    def assign(self, name, partition, shape):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        self._entries[name] = (partition, tuple(shape))

    def partitions(self):
        return sorted({p for p, _ in self._entries.values()})

    def count(self, partition):
        return sum(math.prod(s) for p, s in self._entries.values() if p == partition)

    def total(self):
        return sum(math.prod(s) for _, s in self._entries.values())

    def count_trainable(self, active):
        """Per-partition trainable counts for the ``active`` partition set.

        Returns a dict with per-partition counts, the trainable total, the
        full-model total, and the trainable/full ratio.
        """
        active = set(active)
        per = {p: self.count(p) for p in sorted(active)}
        trainable = sum(per.values())
        total = self.total()
        return {
            "per_partition": per,
            "trainable": trainable,
            "total": total,
            "ratio": trainable / total if total else 0.0,
        }


class ParamSet:
    """Tensor store keyed by name, grouped into freezable partitions."""

    def __init__(self):
        self._tensors = {}  # name -> Tensor
        self._partition_of = {}
        self._frozen = set()

    # -- construction ------------------------------------------------------
    def add(self, name, data, partition):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        self._partition_of[name] = partition
        return t

    def __contains__(self, name):
        return name in self._tensors

    def __getitem__(self, name):
        return self._tensors[name]

    def names(self):
        return sorted(self._tensors)

    def partitions(self):
        return sorted(set(self._partition_of.values()))

    def partition_of(self, name):
        return self._partition_of[name]

    def reassign(self, name, partition):
        if name not in self._tensors:
            raise KeyError(name)
        self._partition_of[name] = partition

    def partitions_matching(self, prefix):
        return sorted({p for p in self._partition_of.values()
                       if p.startswith(prefix)})

    def partition_table(self):
        table = ParamPartition()
        for name in self.names():
            table.assign(name, self._partition_of[name], self._tensors[name].shape)
        return table

    # -- freezing ----------------------------------------------------------
    def freeze(self, *partitions):
        self._frozen.update(partitions)

    def unfreeze(self, *partitions):
        self._frozen.difference_update(partitions)

    def freeze_all_except(self, *partitions):
        keep = set(partitions)
        self._frozen = {p for p in set(self._partition_of.values()) if p not in keep}

    def frozen_partitions(self):
        return sorted(self._frozen)

    def is_trainable(self, name):
        return self._partition_of[name] not in self._frozen

    def trainable_names(self):
        return [n for n in self.names() if self.is_trainable(n)]

    def trainable_tensors(self):
        return [self._tensors[n] for n in self.trainable_names()]

    def items(self, partition=None):
        for n in self.names():
            if partition is None or self._partition_of[n] == partition:
                yield n, self._tensors[n]

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    # -- integrity ---------------------------------------------------------
    def checksum(self, partition=None):
        """SHA-256 over (name, bytes) pairs of one partition (or all)."""
        h = hashlib.sha256()
        for name, t in self.items(partition):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def snapshot(self, partition=None):
        return {n: t.data.copy() for n, t in self.items(partition)}

    def snapshot_trainable(self):
        return {n: self._tensors[n].data.copy() for n in self.trainable_names()}

    def copy(self):
        dup = ParamSet()
        for n in self.names():
            dup.add(n, self._tensors[n].data.copy(), self._partition_of[n])
        dup._frozen = set(self._frozen)
        return dup

    # -- checkpoint container ---------------------------------------------
    def save(self, path, names=None):
        names = sorted(names) if names is not None else self.names()
        index, payloads, offset = [], [], 0
        for n in names:
            t = self._tensors[n]
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            index.append({
                "name": n,
                "shape": list(t.shape),
                "partition": self._partition_of[n],
                "offset": offset,
                "nbytes": len(raw),
            })
            payloads.append(raw)
            offset += len(raw)
        header = json.dumps({"format": 1, "params": index},
                            sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(len(header).to_bytes(8, "little"))
            fh.write(header)
            for raw in payloads:
                fh.write(raw)

    @staticmethod
    def load(path):
        ps = ParamSet()
        for entry, arr in _read_container(path):
            ps.add(entry["name"], arr, entry["partition"])
        return ps

    def load_into(self, path, rename=None):
        """Overwrite matching parameters in place from a checkpoint file.

        ``rename`` optionally maps checkpoint names to local names.
        """
        for entry, arr in _read_container(path):
            name = rename(entry["name"]) if rename else entry["name"]
            if name is None or name not in self._tensors:
                continue
            t = self._tensors[name]
            if t.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{t.shape} vs {arr.shape}")
            t.data[...] = arr


def _read_container(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen).decode())
        body = fh.read()
    for entry in header["params"]:
        raw = body[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        yield entry, arr


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, params: ParamSet, lr, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self):
        for name in self.params.trainable_names():
            t = self.params[name]
            if t.grad is None:
                continue
            g = t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            t.data -= self.lr * g


class Adam:
    """Adam over the trainable partitions; beta1 is configurable (0 allowed)."""

    def __init__(self, params: ParamSet, lr, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self._m, self._v, self._t = {}, {}, 0

    def step(self):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for name in self.params.trainable_names():
            t = self.params[name]
            if t.grad is None:
                continue
            g = t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            m = self._m.get(name)
            v = self._v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            mhat = m / (1 - b1 ** self._t) if b1 else m
            vhat = v / (1 - b2 ** self._t)
            t.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
