"""Array data sources feeding the save, version, and load paths.

A source exposes one or more equally-shaped attributes and serves
region reads. Sources are cheap to clone so each worker (thread or
process) gets its own handles; SyntheticSource is stateless and gives
random access to seeded data, which lets process workers regenerate
their slice instead of shipping buffers.
"""

import os

import numpy as np

from . import container as _c
from .container import Container, ElementType, Hyperslab, chunk_box


class ArraySource:
    """Base: subclasses define attrs, shape, chunk_shape, fills, read()."""

    attrs: list[tuple[str, ElementType]]
    shape: tuple[int, ...]
    chunk_shape: tuple[int, ...]

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def cells(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    @property
    def single_attr(self) -> str:
        return self.attrs[0][0]

    def dtype(self, attr=None) -> ElementType:
        attr = attr or self.single_attr
        for name, t in self.attrs:
            if name == attr:
                return t
        raise KeyError(attr)

    def fill(self, attr=None):
        return 0.0 if self.dtype(attr).is_float else 0

    def read(self, region: Hyperslab, attr=None) -> np.ndarray:
        raise NotImplementedError

    def read_full(self, attr=None) -> np.ndarray:
        return self.read(Hyperslab((0,) * self.rank, self.shape), attr)

    def chunk_cells(self, chunk_coord, attr=None) -> np.ndarray:
        """Full chunk buffer, padded with the fill value on edges."""
        box = chunk_box(chunk_coord, self.chunk_shape, self.shape)
        data = self.read(box, attr)
        if box.count == tuple(self.chunk_shape):
            return data
        out = np.full(self.chunk_shape, self.fill(attr),
                      dtype=self.dtype(attr).np_dtype)
        out[tuple(slice(0, c) for c in box.count)] = data
        return out

    def clone(self) -> "ArraySource":
        return self

    def close(self) -> None:
        pass


class MemorySource(ArraySource):
    def __init__(self, arrays, chunk_shape, fills=None, dtype=None):
        """arrays: ndarray (single attribute "v0") or ordered {name: ndarray}."""
        if isinstance(arrays, np.ndarray):
            arrays = {"v0": arrays}
        self.arrays = {name: np.asarray(a) for name, a in arrays.items()}
        shapes = {a.shape for a in self.arrays.values()}
        if len(shapes) != 1:
            raise ValueError("attribute arrays must share one shape")
        self.shape = shapes.pop()
        self.chunk_shape = tuple(int(c) for c in chunk_shape)
        self.attrs = [(name, ElementType(dtype) if dtype else
                       _dtype_for(a.dtype))
                      for name, a in self.arrays.items()]
        self._fills = fills or {}

    def fill(self, attr=None):
        attr = attr or self.single_attr
        return self._fills.get(attr, super().fill(attr))

    def read(self, region, attr=None):
        attr = attr or self.single_attr
        sel = tuple(slice(s, s + c) for s, c in zip(region.start, region.count))
        return self.arrays[attr][sel]


def _dtype_for(np_dtype) -> ElementType:
    kind = np.dtype(np_dtype)
    for et in ElementType:
        if et.np_dtype == kind.newbyteorder("<"):
            return et
    if kind.kind == "f":
        return ElementType.f64 if kind.itemsize == 8 else ElementType.f32
    if kind.kind in "iu":
        return ElementType.i64 if kind.itemsize == 8 else ElementType.i32
    raise ValueError(f"unsupported dtype {np_dtype}")


class ContainerSource(ArraySource):
    """Reads attributes bound to container datasets; clones reopen handles."""

    def __init__(self, bindings, attrs=None):
        """bindings: {attr: (container file, dataset path)}."""
        self.bindings = {a: (os.path.abspath(f), d)
                         for a, (f, d) in bindings.items()}
        self._handles: dict[str, Container] = {}
        first = next(iter(self.bindings))
        meta = self._handle(first).dataset(self.bindings[first][1])
        self.shape = meta.shape
        self.chunk_shape = meta.chunk_shape
        if attrs is not None:
            self.attrs = [(a, ElementType(t)) for a, t in attrs]
        else:
            self.attrs = [(a, self._meta(a).dtype) for a in self.bindings]

    def _handle(self, attr) -> Container:
        file, _ = self.bindings[attr]
        handle = self._handles.get(attr)
        if handle is None:
            handle = self._handles[attr] = _c.open_file(file, "r")
        return handle

    def _meta(self, attr):
        return self._handle(attr).dataset(self.bindings[attr][1])

    def fill(self, attr=None):
        attr = attr or self.single_attr
        return self._meta(attr).fill

    def read(self, region, attr=None):
        attr = attr or self.single_attr
        return self._handle(attr).read_region(self.bindings[attr][1], region)

    def clone(self):
        return ContainerSource(self.bindings,
                               [(a, t.value) for a, t in self.attrs])

    def close(self):
        for handle in self._handles.values():
            handle.close()
        self._handles = {}

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_handles"] = {}
        return state


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer; uint64 in, well-mixed uint64 out."""
    z = (x + np.uint64(0x9E3779B97F4A7C15))
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SyntheticSource(ArraySource):
    """Deterministic random-access data: cell (attr, flat index) -> value.

    run_length > 1 gives RLE-friendly data (constant runs drawn from a
    small alphabet). Stateless, so process workers regenerate instead of
    receiving buffers; reads of the same region always agree.
    """

    def __init__(self, shape, chunk_shape, seed=0, attr_specs=None,
                 run_length=1):
        self.shape = tuple(int(s) for s in shape)
        self.chunk_shape = tuple(int(c) for c in chunk_shape)
        self.seed = int(seed)
        self.run_length = int(run_length)
        # attr_specs: {name: (lo, hi)} for uniform doubles over [lo, hi)
        self.attr_specs = attr_specs or {"v0": (0.0, 1.0)}
        self.attrs = [(name, ElementType.f64) for name in self.attr_specs]

    def _flat_indices(self, region: Hyperslab) -> np.ndarray:
        idx = np.zeros(region.count, dtype=np.uint64)
        stride = 1
        for d in reversed(range(self.rank)):
            ar = np.arange(region.start[d], region.start[d] + region.count[d],
                           dtype=np.uint64) * np.uint64(stride)
            shape = [1] * self.rank
            shape[d] = region.count[d]
            idx += ar.reshape(shape)
            stride *= self.shape[d]
        return idx

    def read(self, region, attr=None):
        attr = attr or self.single_attr
        lo, hi = self.attr_specs[attr]
        salt = _mix64(np.uint64(self.seed) +
                      _mix64(np.frombuffer(
                          attr.encode().ljust(8, b"\0")[:8], "<u8")))[0]
        with np.errstate(over="ignore"):
            idx = self._flat_indices(region)
            if self.run_length > 1:
                idx //= np.uint64(self.run_length)
            u = _mix64(idx + salt)
        unit = u.astype(np.float64) / np.float64(2**64)
        if self.run_length > 1:
            # Small alphabet keeps runs exactly repeating.
            unit = np.floor(unit * 8) / 8.0
        return lo + unit * (hi - lo)
