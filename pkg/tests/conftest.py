import numpy as np
import pytest

from abridge import container, rlechunk


@pytest.fixture(autouse=True)
def _reset_counters():
    container.reset_counters()
    rlechunk.reset_cell_copy_count()
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def write_array(handle, path, data, chunk_shape, dtype="f64", fill=0.0):
    """Create a stored dataset and write every chunk of `data`."""
    data = np.asarray(data)
    handle.create_dataset(path, dtype, data.shape, chunk_shape, fill)
    for coord in container.iter_chunk_starts(data.shape, chunk_shape):
        box = container.chunk_box(coord, chunk_shape, data.shape)
        sel = tuple(slice(s, s + c) for s, c in zip(box.start, box.count))
        buf = np.full(chunk_shape, fill, dtype=data.dtype)
        buf[tuple(slice(0, c) for c in box.count)] = data[sel]
        handle.write_chunk(path, coord, buf)
