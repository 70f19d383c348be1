""" Middlebury .flo functions - part of flowpatch """

from struct import pack, unpack

import numpy as np

from fpdefs import FLO_MAGIC, FLO_HEADER, FLO_HEADER_SIZE, FormatError


def floUnpack(data):
    """
    Parse a .flo byte string into an (H,W,2) float32 array
    """
    if len(data) < FLO_HEADER_SIZE:
        raise EOFError('Truncated .flo header')

    magic, width, height = unpack(FLO_HEADER, data[:FLO_HEADER_SIZE])
    if magic != FLO_MAGIC:
        raise FormatError('Invalid .flo magic %r' % magic)
    if width < 0 or height < 0:
        raise FormatError('Invalid .flo size %dx%d' % (width, height))

    count = 2 * width * height
    payload = data[FLO_HEADER_SIZE:]
    if len(payload) < 4 * count:
        raise EOFError('Truncated .flo payload: want %d bytes, have %d' %
                       (4 * count, len(payload)))

    flow = np.frombuffer(payload, dtype='<f4', count=count)
    return flow.reshape(height, width, 2).astype(np.float32)


def floPack(flow):
    """
    Assemble the .flo byte string for an (H,W,2) flow array
    """
    flow = np.asarray(flow)
    height, width = flow.shape[:2]
    return (pack(FLO_HEADER, FLO_MAGIC, width, height) +
            np.ascontiguousarray(flow, dtype='<f4').tobytes())
