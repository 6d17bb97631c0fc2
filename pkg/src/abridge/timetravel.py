"""Versioned saves: Full Copy and Chunk Mosaic.

The latest version is always the fully materialized dataset at ``/<name>``.
Past version k lives at ``/PreviousVersions/V<k>``: a stored dataset under
Full Copy, or under Chunk Mosaic a virtual dataset stitching the chunks
superseded at that point (kept in ``/VersionData/V<k>``) with everything
that survived into the next version. The chains only ever point forward
(``V<k>`` references ``V<k+1>`` or the latest), and any version reads
through the ordinary region-read path with no version-aware code.

All metadata and chunk writes of one version save land in a single commit,
so readers never observe a half-saved version.
"""

import numpy as np

from .container import (
    SELF_FILE,
    Container,
    Hyperslab,
    Mapping,
    chunk_box,
    iter_chunk_starts,
)
from .errors import AbridgeError, DatasetNotFoundError
from .sources import ArraySource, MemorySource

PREV_GROUP = "/PreviousVersions"
DATA_GROUP = "/VersionData"


def version_label(k: int) -> str:
    return f"V{k}"


def _latest_path(name: str) -> str:
    return "/" + name.lstrip("/")


def _prev_path(k: int) -> str:
    return f"{PREV_GROUP}/V{k}"


def _data_path(k: int) -> str:
    return f"{DATA_GROUP}/V{k}"


def _as_source(data, like_meta) -> ArraySource:
    if isinstance(data, ArraySource):
        return data
    return MemorySource(np.asarray(data), like_meta.chunk_shape,
                        dtype=like_meta.dtype.value)


def list_versions(handle: Container, name: str) -> list[int]:
    """Version ids, dense ascending; the last one is the latest."""
    latest = _latest_path(name)
    if not handle.has_dataset(latest):
        raise DatasetNotFoundError(f"no dataset {name!r}")
    prev = []
    prefix = PREV_GROUP + "/V"
    for path, _, _, _ in handle.list_datasets():
        if path.startswith(prefix):
            suffix = path[len(prefix):]
            if suffix.isdigit():
                prev.append(int(suffix))
    prev.sort()
    if prev != list(range(len(prev))):
        raise AbridgeError(f"version history of {name!r} is not dense: {prev}")
    return list(range(len(prev) + 1))


def detect_changed_chunks(handle: Container, latest_path: str,
                          source) -> set[tuple[int, ...]]:
    """Chunks whose cells differ in any bit between latest and the new data.

    Never-written chunks compare as fill-value buffers.
    """
    meta = handle.dataset(latest_path)
    source = _as_source(source, meta)
    if tuple(source.shape) != meta.shape:
        raise ValueError(f"source shape {source.shape} != dataset shape "
                         f"{meta.shape}")
    changed = set()
    for coord in iter_chunk_starts(meta.shape, meta.chunk_shape):
        old = handle.read_chunk(latest_path, coord)
        new = source.chunk_cells(coord)
        if (np.asarray(new, dtype=meta.dtype.np_dtype).tobytes()
                != old.tobytes()):
            changed.add(coord)
    return changed


def _write_all(handle, path, source, attr=None):
    meta = handle.dataset(path)
    for coord in iter_chunk_starts(meta.shape, meta.chunk_shape):
        handle.write_chunk(path, coord, source.chunk_cells(coord, attr))


def _repoint(handle, prior_path, old_source: str, new_source: str) -> None:
    """Substitute the source dataset on a prior version's mappings."""
    meta = handle.dataset(prior_path)
    remapped = [
        Mapping(m.source_file, new_source, m.src, m.dst)
        if m.source_file == SELF_FILE and m.source_dataset == old_source
        else m
        for m in meta.mappings]
    handle.recreate_virtual_dataset(prior_path, remapped)


def _is_virtual(handle, path) -> bool:
    return handle.has_dataset(path) and handle.dataset(path).kind == "virtual"


def save_version_full_copy(handle: Container, name: str, data,
                           chunk_shape=None, dtype="f64",
                           fill=0.0) -> int:
    """Materialize the new version completely; the superseded dataset is
    renamed under PreviousVersions unchanged."""
    latest = _latest_path(name)
    if not handle.has_dataset(latest):
        source = (data if isinstance(data, ArraySource)
                  else MemorySource(np.asarray(data), chunk_shape,
                                    dtype=dtype))
        handle.create_dataset(latest, source.dtype(), source.shape,
                              source.chunk_shape, fill)
        _write_all(handle, latest, source)
        handle.commit()
        return 0
    meta = handle.dataset(latest)
    source = _as_source(data, meta)
    if tuple(source.shape) != meta.shape:
        raise ValueError("source shape differs from dataset shape")
    superseded = len(list_versions(handle, name)) - 1
    handle.rename_dataset(latest, _prev_path(superseded))
    # A mosaic predecessor maps into /<name>; those cells now live at the
    # renamed path.
    if superseded >= 1 and _is_virtual(handle, _prev_path(superseded - 1)):
        _repoint(handle, _prev_path(superseded - 1), latest,
                 _prev_path(superseded))
    handle.create_dataset(latest, meta.dtype, meta.shape, meta.chunk_shape,
                          meta.fill)
    _write_all(handle, latest, source)
    handle.commit()
    return superseded + 1


def save_version_chunk_mosaic(handle: Container, name: str, data,
                              chunk_shape=None, dtype="f64",
                              fill=0.0) -> int:
    """Store only the superseded chunks and stitch the past version from a
    virtual dataset over them and the surviving latest chunks."""
    latest = _latest_path(name)
    if not handle.has_dataset(latest):
        return save_version_full_copy(handle, name, data, chunk_shape,
                                      dtype, fill)
    meta = handle.dataset(latest)
    source = _as_source(data, meta)
    changed = detect_changed_chunks(handle, latest, source)
    p = len(list_versions(handle, name)) - 1   # id of the version superseded

    # 1. Old contents of the changed chunks, hidden under VersionData.
    handle.create_dataset(_data_path(p), meta.dtype, meta.shape,
                          meta.chunk_shape, meta.fill)
    for coord in sorted(changed):
        handle.write_chunk(_data_path(p), coord,
                           handle.read_chunk(latest, coord))

    # 2. The past version as a stitch: changed chunks from VersionData,
    #    unchanged chunks from the (about to be updated) latest.
    mappings = []
    for coord in iter_chunk_starts(meta.shape, meta.chunk_shape):
        box = chunk_box(coord, meta.chunk_shape, meta.shape)
        target = _data_path(p) if coord in changed else latest
        mappings.append(Mapping(SELF_FILE, target, box, box))
    handle.create_virtual_dataset(_prev_path(p), meta.dtype, meta.shape,
                                  meta.fill, mappings)

    # 3. The prior version no longer reaches through /<name> but through
    #    the stitch just created.
    if p >= 1 and _is_virtual(handle, _prev_path(p - 1)):
        _repoint(handle, _prev_path(p - 1), latest, _prev_path(p))

    # 4. Only now overwrite the changed chunks of the latest.
    for coord in sorted(changed):
        handle.write_chunk(latest, coord, source.chunk_cells(coord))

    handle.commit()
    return p + 1


def read_version(handle: Container, name: str, k: int) -> np.ndarray:
    """Read version k through the plain region-read path."""
    versions = list_versions(handle, name)
    if k not in versions:
        raise DatasetNotFoundError(f"{name!r} has no version {k}")
    path = _latest_path(name) if k == versions[-1] else _prev_path(k)
    shape = handle.dataset(path).shape
    return handle.read_region(path, Hyperslab((0,) * len(shape), shape))


def version_data_bytes(handle: Container, name: str, k: int) -> int:
    """Live chunk bytes attributable to keeping version k on disk."""
    versions = list_versions(handle, name)
    if k == versions[-1]:
        return handle.data_bytes(_latest_path(name))
    path = _prev_path(k)
    meta = handle.dataset(path)
    if meta.kind == "stored":
        return meta.data_bytes()
    return handle.data_bytes(_data_path(k))
