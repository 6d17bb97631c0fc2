"""External-array registry and the chunk-to-instance assignment function.

The catalog is one JSON document (canonical formatting, like container
metadata) mapping array names to schemas and per-attribute bindings:

    {"arrays": {"<name>": {"schema": {...},
                           "bindings": {"<attr>": ["file", "dataset"]}}}}

Binding file paths are resolved relative to the catalog file's directory.
Updates are serialized by the catalog's writer lock and published with an
atomic replace; lookups need no lock.

Chunk assignment is computed at query time, never persisted, so a changed
instance count or an externally grown dataset is picked up by the next
query. The default assignment is round-robin over the row-major
linearization of the chunk grid; alternative policies plug in via ``mu``.
"""

import json
import os
import tempfile
from dataclasses import dataclass

from . import container
from .container import ElementType
from .errors import CatalogError
from .locking import WriterLock

LOCK_TIMEOUT_S = 10.0


def round_robin(linear_index: int, n_instances: int) -> int:
    return linear_index % n_instances


@dataclass
class ArraySchema:
    name: str
    shape: tuple[int, ...]
    chunk_shape: tuple[int, ...]
    attributes: list[tuple[str, ElementType]]

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.chunk_shape = tuple(int(c) for c in self.chunk_shape)
        self.attributes = [(a, ElementType(t)) for a, t in self.attributes]
        if len(self.shape) < 1:
            raise ValueError("rank must be >= 1")
        if len(self.chunk_shape) != len(self.shape):
            raise ValueError("chunk_shape rank differs from shape rank")

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def grid(self) -> tuple[int, ...]:
        return container.grid_shape(self.shape, self.chunk_shape)

    @property
    def n_chunks(self) -> int:
        return container.chunk_count(self.shape, self.chunk_shape)

    def attr_type(self, attr: str) -> ElementType:
        for name, dtype in self.attributes:
            if name == attr:
                return dtype
        raise CatalogError(f"array {self.name!r} has no attribute {attr!r}")

    def to_json(self) -> dict:
        return {"name": self.name, "shape": list(self.shape),
                "chunk_shape": list(self.chunk_shape),
                "attributes": [[a, t.value] for a, t in self.attributes]}

    @staticmethod
    def from_json(doc) -> "ArraySchema":
        return ArraySchema(doc["name"], doc["shape"], doc["chunk_shape"],
                           [(a, t) for a, t in doc["attributes"]])


@dataclass
class CatalogEntry:
    schema: ArraySchema
    bindings: dict[str, tuple[str, str]]  # attr -> (container file, dataset)

    def __post_init__(self):
        attrs = [a for a, _ in self.schema.attributes]
        if sorted(self.bindings) != sorted(attrs):
            raise CatalogError(
                f"bindings {sorted(self.bindings)} do not match attributes "
                f"{sorted(attrs)}")


def chunk_linearize(schema: ArraySchema, chunk_coord) -> int:
    """Row-major linear index of an aligned chunk coordinate."""
    coord = tuple(int(c) for c in chunk_coord)
    if len(coord) != schema.rank:
        raise ValueError("coordinate rank mismatch")
    if any(c % ch for c, ch in zip(coord, schema.chunk_shape)):
        raise ValueError(f"{coord} is not chunk-aligned")
    if any(c < 0 or c >= s for c, s in zip(coord, schema.shape)):
        raise ValueError(f"{coord} outside shape {schema.shape}")
    grid_coord = tuple(c // ch for c, ch in zip(coord, schema.chunk_shape))
    return container.linearize_grid(grid_coord, schema.grid)


def chunk_delinearize(schema: ArraySchema, linear: int) -> tuple[int, ...]:
    if not 0 <= linear < schema.n_chunks:
        raise ValueError(f"linear index {linear} outside chunk grid")
    grid_coord = container.delinearize_grid(linear, schema.grid)
    return tuple(g * ch for g, ch in zip(grid_coord, schema.chunk_shape))


def assign_chunks(schema: ArraySchema, n_instances: int, instance: int,
                  mu=round_robin) -> list[tuple[int, ...]]:
    """Chunk coordinates owned by `instance`, ascending by linear index.

    The union over all instances partitions the grid; computed per query.
    """
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    if not 0 <= instance < n_instances:
        raise ValueError("instance ordinal outside [0, n_instances)")
    return [chunk_delinearize(schema, lin)
            for lin in range(schema.n_chunks)
            if mu(lin, n_instances) == instance]


class Catalog:
    def __init__(self, path):
        self.path = os.path.abspath(path)

    def _load(self) -> dict:
        if not os.path.exists(self.path):
            return {"arrays": {}}
        with open(self.path, "rb") as f:
            try:
                return json.loads(f.read().decode("utf-8"))
            except ValueError as exc:
                raise CatalogError(f"catalog {self.path} unreadable: {exc}")

    def _store(self, doc: dict) -> None:
        body = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(self.path) or ".",
                                   prefix=".catalog-")
        try:
            with os.fdopen(fd, "w") as f:
                f.write(body)
            os.replace(tmp, self.path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def _resolve(self, file: str) -> str:
        if os.path.isabs(file):
            return file
        return os.path.join(os.path.dirname(self.path), file)

    def register_external_array(self, name: str, schema: ArraySchema,
                                bindings: dict) -> None:
        """Bindings are late-bound: target containers need not exist yet."""
        entry = CatalogEntry(schema, {a: (f, d)
                                      for a, (f, d) in bindings.items()})
        lock = WriterLock(self.path)
        lock.acquire(LOCK_TIMEOUT_S)
        try:
            doc = self._load()
            if name in doc["arrays"]:
                raise CatalogError(f"array {name!r} already registered")
            doc["arrays"][name] = {
                "schema": entry.schema.to_json(),
                "bindings": {a: [f, d]
                             for a, (f, d) in entry.bindings.items()}}
            self._store(doc)
        finally:
            lock.release()

    def entry(self, name: str) -> CatalogEntry:
        doc = self._load()
        sub = doc["arrays"].get(name)
        if sub is None:
            raise CatalogError(f"unknown array {name!r}")
        return CatalogEntry(ArraySchema.from_json(sub["schema"]),
                            {a: (f, d)
                             for a, (f, d) in sub["bindings"].items()})

    def names(self) -> list[str]:
        return sorted(self._load()["arrays"])

    def resolved_bindings(self, name: str) -> dict[str, tuple[str, str]]:
        """Bindings with file paths resolved against the catalog location."""
        entry = self.entry(name)
        return {a: (self._resolve(f), d)
                for a, (f, d) in entry.bindings.items()}

    def lookup(self, name: str, attr: str):
        """Resolve (file, dataset, schema) for one attribute.

        The bound dataset's shape is re-read from the container; if the
        catalog is stale, the container wins and the entry is rewritten.
        """
        entry = self.entry(name)
        if attr not in entry.bindings:
            raise CatalogError(f"array {name!r} has no attribute {attr!r}")
        file, dataset = entry.bindings[attr]
        resolved = self._resolve(file)
        with container.open_file(resolved, "r") as handle:
            meta = handle.dataset(dataset)
            true_shape = meta.shape
            true_chunks = meta.chunk_shape
        schema = entry.schema
        if (true_shape != schema.shape
                or (true_chunks and true_chunks != schema.chunk_shape)):
            schema = ArraySchema(schema.name, true_shape,
                                 true_chunks or schema.chunk_shape,
                                 schema.attributes)
            self._repair(name, schema)
        return resolved, dataset, schema

    def _repair(self, name: str, schema: ArraySchema) -> None:
        lock = WriterLock(self.path)
        lock.acquire(LOCK_TIMEOUT_S)
        try:
            doc = self._load()
            if name in doc["arrays"]:
                doc["arrays"][name]["schema"] = schema.to_json()
                self._store(doc)
        finally:
            lock.release()
