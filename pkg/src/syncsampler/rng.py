"""Counter-based random streams.

Every Gaussian draw is addressed by ``(seed, stream, step, view, draw)`` and
produced by a Philox generator keyed from that tuple, so a draw never depends
on how many other draws happened before it or in which thread.
"""

import zlib

import numpy as np

_STREAMS = {}


def _stream_id(name):
    if name not in _STREAMS:
        _STREAMS[name] = zlib.crc32(name.encode("utf-8"))
    return _STREAMS[name]


def generator(seed, stream, step=0, view=0, draw=0):
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(
        entropy=int(seed),
        spawn_key=(_stream_id(stream), int(step), int(view), int(draw)),
    )
    return np.random.Generator(np.random.Philox(ss))


def normal(seed, stream, shape, step=0, view=0, draw=0):
    return generator(seed, stream, step, view, draw).standard_normal(shape)


def normal_views(seed, stream, view_ids, shape, step=0, draw=0):
    """Stack one independent draw per view id along a new leading axis."""
    return np.stack(
        [normal(seed, stream, shape, step=step, view=v, draw=draw) for v in view_ids]
    )
