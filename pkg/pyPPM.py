""" Binary PPM (P6) functions - part of flowpatch """

import re

import numpy as np

from fpdefs import PPM_MAGIC, PPM_MAXVAL, FormatError

# magic, width, height, maxval separated by whitespace and comments,
#   then exactly one whitespace byte before the raster
_HEADER = re.compile(br'^(P\d)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)'
                     br'(?:\s+|#[^\n]*\n)+(\d+)\s')


def ppmUnpack(data):
    """
    Parse a P6 byte string into an (H,W,3) uint8 array
    """
    m = _HEADER.match(data)
    if m is None or m.group(1) != PPM_MAGIC:
        raise FormatError('Not a binary P6 PPM file')

    width, height, maxval = (int(m.group(2)), int(m.group(3)),
                             int(m.group(4)))
    if maxval != PPM_MAXVAL:
        raise FormatError('Unsupported PPM maxval %d' % maxval)

    count = width * height * 3
    raster = data[m.end():]
    if len(raster) < count:
        raise EOFError('Truncated PPM raster: want %d bytes, have %d' %
                       (count, len(raster)))

    return np.frombuffer(raster, dtype=np.uint8,
                         count=count).reshape(height, width, 3).copy()


def ppmPack(pixels):
    """
    Assemble a P6 byte string from an (H,W,3) uint8 array
    """
    pixels = np.asarray(pixels, dtype=np.uint8)
    height, width = pixels.shape[:2]
    head = b'%s\n%d %d\n%d\n' % (PPM_MAGIC, width, height, PPM_MAXVAL)
    return head + np.ascontiguousarray(pixels).tobytes()
