""" Dense raster types, file I/O and visualization - part of flowpatch

Rasters are plain numpy arrays, double precision in memory:
  Image        (H,W,C)  C in {1,3}, values in [0,1]
  FlowField    (H,W,2)  (u,v) in pixels/frame
  PixelMask    (H,W)    uint8, strictly 0/1
  GradientMap  (H,W)    nonnegative
Functions here never modify their inputs.
"""

import logging

import numpy as np

from pyFLO import floPack, floUnpack
from pyPPM import ppmPack, ppmUnpack
from fpdefs import *  # noqa: F403

log = logging.getLogger(__name__)


def asImage(data):
    """ Validate and convert to a (H,W,C) float64 image """
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError('Image must be HxWx1 or HxWx3, got %r' %
                         (img.shape,))
    if not np.all(np.isfinite(img)):
        raise ValueError('Image contains non-finite values')
    return img


def asFlow(data):
    """ Validate and convert to a (H,W,2) float64 flow field """
    flow = np.asarray(data, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ShapeError('Flow must be HxWx2, got %r' % (flow.shape,))
    if not np.all(np.isfinite(flow)):
        raise ValueError('Flow contains non-finite values')
    return flow


def asMask(data):
    """ Validate and convert to a (H,W) uint8 binary mask """
    mask = np.asarray(data)
    if mask.ndim != 2:
        raise ShapeError('Mask must be HxW, got %r' % (mask.shape,))
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError('Mask values must be 0 or 1')
    return mask.astype(np.uint8)


def asGradMap(data):
    """ Validate and convert to a (H,W) float64 gradient map """
    gmap = np.asarray(data, dtype=np.float64)
    if gmap.ndim != 2:
        raise ShapeError('Gradient map must be HxW, got %r' % (gmap.shape,))
    if not np.all(np.isfinite(gmap)) or np.any(gmap < 0):
        raise ValueError('Gradient map must be finite and nonnegative')
    return gmap


def sameShape(a, b, what='rasters'):
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError('%s differ in size: %r vs %r' %
                         (what, a.shape[:2], b.shape[:2]))


#
# Grayscale and replicate-boundary shifts. Each has an adjoint so that
#   stages built from them can run backward exactly.
#

def toGray(img):
    """ Rec.601 luma of an (H,W,C) image -> (H,W) """
    if img.shape[2] == 1:
        return img[:, :, 0].copy()
    r, g, b = LUMA_WEIGHTS
    return r * img[:, :, 0] + g * img[:, :, 1] + b * img[:, :, 2]


def toGrayT(g, channels):
    """ Adjoint of toGray """
    if channels == 1:
        return g[:, :, None].copy()
    return g[:, :, None] * np.asarray(LUMA_WEIGHTS)[None, None, :]


def _shiftAxis(x, k, axis):
    # y[i] = x[clip(i+k)], k in {-1,0,1}
    if k == 0:
        return x
    n = x.shape[axis]
    idx = np.clip(np.arange(n) + k, 0, n - 1)
    return np.take(x, idx, axis=axis)


def _shiftAxisT(g, k, axis):
    if k == 0:
        return g
    out = np.zeros_like(g)
    n = g.shape[axis]
    sl = [slice(None)] * g.ndim

    def at(s):
        sl2 = list(sl)
        sl2[axis] = s
        return tuple(sl2)

    if k == 1:
        out[at(slice(1, n))] += g[at(slice(0, n - 1))]
        out[at(n - 1)] += g[at(n - 1)]
    elif k == -1:
        out[at(slice(0, n - 1))] += g[at(slice(1, n))]
        out[at(0)] += g[at(0)]
    else:
        raise ValueError('Only unit shifts are supported')
    return out


def shiftRep(x, dy, dx):
    """ y[i,j] = x[clip(i+dy), clip(j+dx)] on the two leading axes """
    return _shiftAxis(_shiftAxis(x, dy, 0), dx, 1)


def shiftRepT(g, dy, dx):
    """ Adjoint of shiftRep """
    return _shiftAxisT(_shiftAxisT(g, dx, 1), dy, 0)


def diffFwd(x, axis):
    """ Forward difference x[i+1]-x[i] with replicate boundary """
    k = (1, 0) if axis == 0 else (0, 1)
    return shiftRep(x, *k) - x


def diffFwdT(g, axis):
    k = (1, 0) if axis == 0 else (0, 1)
    return shiftRepT(g, *k) - g


def diffCentral(x, axis):
    """ Central difference (x[i+1]-x[i-1])/2 with replicate boundary """
    if axis == 0:
        return 0.5 * (shiftRep(x, 1, 0) - shiftRep(x, -1, 0))
    return 0.5 * (shiftRep(x, 0, 1) - shiftRep(x, 0, -1))


def diffCentralT(g, axis):
    if axis == 0:
        return 0.5 * (shiftRepT(g, 1, 0) - shiftRepT(g, -1, 0))
    return 0.5 * (shiftRepT(g, 0, 1) - shiftRepT(g, 0, -1))


def laplace5(x):
    """ 5-point Laplacian with replicate boundary """
    return (shiftRep(x, 1, 0) + shiftRep(x, -1, 0) +
            shiftRep(x, 0, 1) + shiftRep(x, 0, -1) - 4.0 * x)


def laplace5T(g):
    return (shiftRepT(g, 1, 0) + shiftRepT(g, -1, 0) +
            shiftRepT(g, 0, 1) + shiftRepT(g, 0, -1) - 4.0 * g)


def _innerWeights(x, axis):
    n = x.shape[axis]
    e = np.ones(n)
    e[0] = e[-1] = 0.0
    shape = [1] * x.ndim
    shape[axis] = n
    return e.reshape(shape)


def _diff2Axis(x, axis):
    # second difference, zero on the first and last index of axis
    d = _shiftAxis(x, 1, axis) + _shiftAxis(x, -1, axis) - 2.0 * x
    return d * _innerWeights(x, axis)


def _diff2AxisT(g, axis):
    ge = g * _innerWeights(g, axis)
    return _shiftAxisT(ge, 1, axis) + _shiftAxisT(ge, -1, axis) - 2.0 * ge


def laplaceLinear(x):
    """
    5-point Laplacian with a linear-extrapolation boundary: a raster edge
      adds no curvature, so any linear ramp maps to zero everywhere
    """
    return _diff2Axis(x, 0) + _diff2Axis(x, 1)


def laplaceLinearT(g):
    return _diff2AxisT(g, 0) + _diff2AxisT(g, 1)


#
# File I/O
#

def readFlo(path):
    """ Read a Middlebury .flo file into a FlowField """
    with open(path, 'rb') as f:
        data = f.read()
    flow = floUnpack(data)
    log.debug("[FLO] read %s: %dx%d", path, flow.shape[1], flow.shape[0])
    return flow.astype(np.float64)


def writeFlo(flow, path):
    """ Write a FlowField as a Middlebury .flo file """
    flow = asFlow(flow)
    with open(path, 'wb') as f:
        f.write(floPack(flow))


def readPPM(path):
    """ Read a binary P6 PPM into an Image in [0,1] """
    with open(path, 'rb') as f:
        data = f.read()
    return ppmUnpack(data).astype(np.float64) / PPM_MAXVAL


def quantize(img):
    """ [0,1] image -> uint8, round(v*255) clamped """
    return np.clip(np.round(np.asarray(img) * PPM_MAXVAL), 0,
                   PPM_MAXVAL).astype(np.uint8)


def writePPM(img, path):
    """ Write a 3-channel Image as binary P6 PPM """
    img = asImage(img)
    if img.shape[2] != 3:
        raise ShapeError('PPM output needs 3 channels, got %d' % img.shape[2])
    with open(path, 'wb') as f:
        f.write(ppmPack(quantize(img)))


def maskToImage(mask):
    """ Binary mask as a black/white 3-channel image """
    return np.repeat(asMask(mask)[:, :, None].astype(np.float64), 3, axis=2)


#
# Flow visualization, Middlebury color wheel
#

def makeColorWheel():
    """
    Color wheel of the Middlebury flow benchmark, 55 entries in 0..255
    """
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0

    wheel[0:RY, 0] = 255
    wheel[0:RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


def flowToColor(flow, maxMagnitude=None):
    """
    Encode flow as an RGB image in [0,1]: hue is direction, saturation is
      magnitude/maxMagnitude clamped to 1. maxMagnitude None means auto.
    """
    flow = asFlow(flow)
    u, v = flow[:, :, 0], flow[:, :, 1]
    mag = np.sqrt(u * u + v * v)

    if maxMagnitude is None:
        maxMagnitude = float(mag.max()) if mag.size else 0.0
    if maxMagnitude <= 0:
        maxMagnitude = 1.0

    wheel = makeColorWheel() / 255.0
    ncols = wheel.shape[0]
    rad = np.minimum(mag / maxMagnitude, 1.0)

    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = k0 + 1
    k1[k1 == ncols] = 0
    f = fk - k0

    out = np.empty(flow.shape[:2] + (3,))
    for i in range(3):
        col = (1 - f) * wheel[k0, i] + f * wheel[k1, i]
        out[:, :, i] = 1 - rad * (1 - col)
    return np.clip(out, 0.0, 1.0)
