"""Named parameter storage, optimizer state and the NWCK checkpoint format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

CKPT_MAGIC = b"NWCK"
CKPT_VERSION = 1
_RUNNING_PREFIX = "@running/"


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Parameters keyed by name, each with a same-shape gradient buffer.

    ``state`` holds per-parameter optimizer buffers and ``running`` holds
    batch-norm running statistics keyed by the normalization layer name.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.running: dict[str, dict[str, np.ndarray]] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def add_running(self, name: str, channels: int):
        self.running[name] = {"mean": np.zeros(channels), "var": np.ones(channels)}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def num_values(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self.params.items() if n.startswith(prefix))

    def zero_grad(self):
        for t in self.params.values():
            t.grad.fill(0.0)

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad.copy() for n, t in self.params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def frozen(self) -> "FrozenParams":
        return FrozenParams(self)

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for n, t in self.params.items():
            new.add(n, t.data.copy())
        new.state = {n: {k: v.copy() for k, v in s.items()} for n, s in self.state.items()}
        new.running = {n: {k: v.copy() for k, v in s.items()} for n, s in self.running.items()}
        return new

    def equals(self, other: "ParamStore") -> bool:
        """Bit-exact comparison of parameter values and running statistics."""
        if self.names() != other.names() or set(self.running) != set(other.running):
            return False
        for n in self.params:
            if self.params[n].data.tobytes() != other.params[n].data.tobytes():
                return False
        for n, s in self.running.items():
            for k in s:
                if s[k].tobytes() != other.running[n][k].tobytes():
                    return False
        return True

    # ------------------------------------------------------------- checkpoints

    def save(self, path):
        records = [(n, t.data) for n, t in self.params.items()]
        for layer, stats in self.running.items():
            for k, v in stats.items():
                records.append((f"{_RUNNING_PREFIX}{layer}/{k}", v))
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<I", CKPT_VERSION))
            for name, arr in records:
                raw = name.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        buf = Path(path).read_bytes()
        if buf[:4] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
        if len(buf) < 8:
            raise CheckpointError(f"{path}: truncated header")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
        store = cls()
        pos = 8
        try:
            while pos < len(buf):
                (nlen,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                name = buf[pos : pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                dims = struct.unpack_from(f"<{rank}I", buf, pos)
                pos += 4 * rank
                count = int(np.prod(dims)) if rank else 1
                end = pos + 8 * count
                if end > len(buf):
                    raise CheckpointError(f"{path}: truncated record {name!r}")
                arr = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64).reshape(dims)
                pos = end
                if name.startswith(_RUNNING_PREFIX):
                    layer, key = name[len(_RUNNING_PREFIX) :].rsplit("/", 1)
                    store.running.setdefault(layer, {})[key] = arr
                else:
                    store.add(name, arr)
        except struct.error as exc:
            raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
        return store


class FrozenParams:
    """Read-only view: parameters come back as constants that never get gradients."""

    def __init__(self, store: ParamStore):
        self._store = store
        self.running = store.running
        self._cache: dict[str, Tensor] = {}

    def __getitem__(self, name):
        t = self._cache.get(name)
        src = self._store.params[name]
        if t is None or t.data is not src.data:
            t = Tensor(src.data)
            self._cache[name] = t
        return t

    def __contains__(self, name):
        return name in self._store.params

    def names(self):
        return self._store.names()
