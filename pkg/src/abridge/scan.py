"""Per-instance chunk scan over an external array.

The operator surface is start / next / set_position. start opens the bound
container read-only and assigns chunks to this instance at query time,
using the shape read from the container rather than the possibly-stale
catalog. next wraps each dense chunk buffer as a single-literal-segment
chunk (no copy, no run detection) and advances; end of scan is returned as
None and stays None on further calls. set_position binary-searches the
assigned list and repositions without reading anything.
"""

import time
from bisect import bisect_left
from dataclasses import dataclass, field

from . import container as _c
from .catalog import ArraySchema, Catalog, round_robin
from .container import Container, Hyperslab, chunk_box
from .rlechunk import RleChunk, masquerade_dense


@dataclass
class ScanState:
    handle: Container
    dataset: str
    schema: ArraySchema           # shape/chunks as read from the container
    n_instances: int
    instance: int
    cp: list[int]                 # assigned chunks, ascending linear index
    chunk_ptr: int = 0
    chunks_read: int = 0
    read_seconds: float = field(default=0.0)

    def close(self) -> None:
        self.handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def start(catalog: Catalog, obj: str, attr: str, n_instances: int = 1,
          instance: int = 0, mu=round_robin) -> ScanState:
    file, dataset, schema = catalog.lookup(obj, attr)
    handle = _c.open_file(file, "r")
    meta = handle.dataset(dataset)
    # Assignment is over the true on-disk grid, at query time.
    true = ArraySchema(schema.name, meta.shape, meta.chunk_shape,
                       schema.attributes)
    cp = [lin for lin in range(true.n_chunks)
          if mu(lin, n_instances) == instance]
    return ScanState(handle=handle, dataset=dataset, schema=true,
                     n_instances=n_instances, instance=instance, cp=cp)


def _chunk_region(state: ScanState, linear: int) -> Hyperslab:
    grid_coord = _c.delinearize_grid(linear, state.schema.grid)
    coord = tuple(g * ch for g, ch in
                  zip(grid_coord, state.schema.chunk_shape))
    return chunk_box(coord, state.schema.chunk_shape, state.schema.shape)


def next_chunk(state: ScanState):
    """Return the next assigned chunk as an RleChunk, or None at the end."""
    if state.chunk_ptr >= len(state.cp):
        return None
    linear = state.cp[state.chunk_ptr]
    region = _chunk_region(state, linear)
    t0 = time.perf_counter()
    buf = state.handle.read_region(state.dataset, region)
    state.read_seconds += time.perf_counter() - t0
    state.chunks_read += 1
    state.chunk_ptr += 1
    return masquerade_dense(buf, region.start)


def set_position(state: ScanState, pos) -> bool:
    """Point the scan at the chunk containing `pos` if it is assigned here.

    Returns False (and leaves the scan untouched) when that chunk belongs
    to another instance. Rewinding to an earlier chunk is allowed.
    """
    pos = tuple(int(p) for p in pos)
    if len(pos) != state.schema.rank:
        raise ValueError("position rank mismatch")
    if any(p < 0 or p >= s for p, s in zip(pos, state.schema.shape)):
        raise ValueError(f"position {pos} outside shape {state.schema.shape}")
    grid_coord = tuple(p // ch for p, ch in zip(pos, state.schema.chunk_shape))
    linear = _c.linearize_grid(grid_coord, state.schema.grid)
    i = bisect_left(state.cp, linear)
    if i < len(state.cp) and state.cp[i] == linear:
        state.chunk_ptr = i
        return True
    return False


def drain(state: ScanState) -> list[RleChunk]:
    """All remaining chunks of this instance, in assignment order."""
    out = []
    while True:
        chunk = next_chunk(state)
        if chunk is None:
            return out
        out.append(chunk)
