"""In-memory run-length-encoded chunks for the query path.

A chunk is a sequence of segments. Each segment covers ``length`` cells and
is either a run (``same=True``, one stored element) or a literal
(``same=False``, ``length`` stored elements). The encoder only emits runs of
at least RUN_THRESHOLD cells; shorter repeats save nothing at 4/8-byte
elements and are folded into the surrounding literal.

Dense buffers coming off the container read path are not encoded at all:
``masquerade_dense`` wraps them as a single literal segment that aliases the
buffer, so scanning performs no cell copies or comparisons.
"""

import threading
from dataclasses import dataclass, field

import numpy as np

RUN_THRESHOLD = 3

# Cells copied or materialized by this module; tests assert the masquerade
# and run-batch paths leave it untouched.
_copy_lock = threading.Lock()
_cells_copied = 0


def _count_copies(n: int) -> None:
    global _cells_copied
    with _copy_lock:
        _cells_copied += n


def cell_copy_count() -> int:
    return _cells_copied


def reset_cell_copy_count() -> None:
    global _cells_copied
    with _copy_lock:
        _cells_copied = 0


@dataclass
class RleSegment:
    length: int
    same: bool
    data: np.ndarray  # one element if same, else `length` elements

    def __post_init__(self):
        self.data = np.atleast_1d(np.asarray(self.data))
        want = 1 if self.same else self.length
        if self.length < 1:
            raise ValueError("segment length must be >= 1")
        if self.data.size != want:
            raise ValueError(
                f"segment holds {self.data.size} elements, expected {want}"
            )


@dataclass
class RleChunk:
    chunk_coord: tuple[int, ...]
    cell_count: int
    segments: list[RleSegment] = field(default_factory=list)

    def __post_init__(self):
        total = sum(s.length for s in self.segments)
        if total != self.cell_count:
            raise ValueError(
                f"segments cover {total} cells, chunk declares {self.cell_count}"
            )


def encode_rle(buf, chunk_coord=()) -> RleChunk:
    """Greedy maximal-run encoding of a dense buffer.

    Runs shorter than RUN_THRESHOLD are left inside literal segments.
    """
    values = np.asarray(buf).ravel()
    n = values.size
    if n == 0:
        raise ValueError("cannot encode an empty buffer")

    # Boundaries of maximal equal-value runs, via bitwise comparison so NaN
    # repeats still count as runs.
    raw = values.view(np.uint8).reshape(n, values.itemsize)
    change = np.nonzero((raw[1:] != raw[:-1]).any(axis=1))[0] + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [n]))
    qualifying = np.nonzero(ends - starts >= RUN_THRESHOLD)[0]

    segments: list[RleSegment] = []

    def literal(lo, hi):
        seg = values[lo:hi].copy()
        _count_copies(seg.size)
        segments.append(RleSegment(hi - lo, False, seg))

    pos = 0
    for qi in qualifying:
        s, e = int(starts[qi]), int(ends[qi])
        if pos < s:
            literal(pos, s)
        segments.append(RleSegment(e - s, True, values[s:s + 1].copy()))
        _count_copies(1)
        pos = e
    if pos < n:
        literal(pos, n)

    return RleChunk(tuple(chunk_coord), n, segments)


def decode_rle(chunk: RleChunk) -> np.ndarray:
    """Expand segments in order into a dense buffer."""
    parts = []
    for seg in chunk.segments:
        if seg.same:
            parts.append(np.repeat(seg.data, seg.length))
        else:
            parts.append(seg.data)
    out = np.concatenate(parts) if parts else np.empty(0)
    _count_copies(out.size)
    return out


def masquerade_dense(buf: np.ndarray, chunk_coord=()) -> RleChunk:
    """Wrap a dense buffer as one literal segment without copying it.

    No value comparisons are performed; the segment aliases ``buf``.
    """
    flat = buf.ravel()  # view when contiguous
    return RleChunk(tuple(chunk_coord), flat.size,
                    [RleSegment(flat.size, False, flat)])


def iterate_tiled(chunk: RleChunk, tile_size: int, visit) -> None:
    """Feed the chunk to ``visit`` in order, in batches of <= tile_size cells.

    Literal segments arrive as ndarray views; runs arrive as (value, count)
    pairs and are never materialized.
    """
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    for seg in chunk.segments:
        if seg.same:
            value = seg.data[0]
            remaining = seg.length
            while remaining > 0:
                batch = min(remaining, tile_size)
                visit((value, batch))
                remaining -= batch
        else:
            for start in range(0, seg.length, tile_size):
                visit(seg.data[start:start + tile_size])
