""" Differentiable optical flow estimator - part of flowpatch

The reference estimator is an unrolled Horn-Schunck solver. Every Jacobi
iteration is an exact-gradient stage, so a loss on the flow can be pulled
back to both input frames through the whole solver.

Stage data layout:
  pair   (2,H,W,C)   stacked frames
  state  (5,H,W)     u, v, Ix, Iy, It
  flow   (H,W,2)
"""

import logging

import numpy as np

from fpcore import (asImage, asFlow, toGray, toGrayT, shiftRep,
                    shiftRepT, diffCentral, diffCentralT)
from fpdiff import fpStage, fpTape
from fpdefs import *  # noqa: F403

log = logging.getLogger(__name__)


def hsConfig(alpha=HS_ALPHA, iterations=HS_ITERS):
    """ Build a validated Horn-Schunck config dict """
    cfg = {'alpha': float(alpha), 'iterations': int(iterations)}
    if cfg['alpha'] <= 0:
        raise ConfigError('Horn-Schunck alpha must be positive')
    if cfg['iterations'] < 1:
        raise ConfigError('Horn-Schunck needs at least one iteration')
    return cfg


def avg4(x):
    """ 4-neighbour average with replicate boundary """
    return 0.25 * (shiftRep(x, 1, 0) + shiftRep(x, -1, 0) +
                   shiftRep(x, 0, 1) + shiftRep(x, 0, -1))


def avg4T(g):
    return 0.25 * (shiftRepT(g, 1, 0) + shiftRepT(g, -1, 0) +
                   shiftRepT(g, 0, 1) + shiftRepT(g, 0, -1))


class fpHSPrep(fpStage):
    """
    Frame pair -> initial solver state: zero flow plus image derivatives
      (spatial ones averaged over both frames, temporal I2-I1)
    """
    name = 'hs-prep'

    def check(self, x):
        if np.ndim(x) != 4 or np.shape(x)[0] != 2:
            raise ShapeError('%s expects a stacked frame pair, got %r' %
                             (self.name, np.shape(x)))

    def forward(self, pair):
        g1 = INTENSITY_SCALE * toGray(pair[0])
        g2 = INTENSITY_SCALE * toGray(pair[1])
        Ix = 0.5 * (diffCentral(g1, 1) + diffCentral(g2, 1))
        Iy = 0.5 * (diffCentral(g1, 0) + diffCentral(g2, 0))
        It = g2 - g1
        zero = np.zeros_like(g1)
        return np.stack([zero, zero, Ix, Iy, It]), pair.shape[3]

    def backward(self, channels, g):
        gIx, gIy, gIt = g[2], g[3], g[4]
        common = 0.5 * (diffCentralT(gIx, 1) + diffCentralT(gIy, 0))
        g1 = INTENSITY_SCALE * toGrayT(common - gIt, channels)
        g2 = INTENSITY_SCALE * toGrayT(common + gIt, channels)
        return np.stack([g1, g2])


class fpHSIter(fpStage):
    """
    One Jacobi step:
      r = (Ix*ubar + Iy*vbar + It) / (alpha^2 + Ix^2 + Iy^2)
      u = ubar - Ix*r,  v = vbar - Iy*r
    """
    name = 'hs-iter'

    def __init__(self, alpha):
        self.alpha2 = float(alpha) ** 2

    def check(self, x):
        if np.ndim(x) != 3 or np.shape(x)[0] != 5:
            raise ShapeError('%s expects a 5xHxW state, got %r' %
                             (self.name, np.shape(x)))

    def forward(self, state):
        u, v, Ix, Iy, It = state
        ub = avg4(u)
        vb = avg4(v)
        D = self.alpha2 + Ix * Ix + Iy * Iy
        r = (Ix * ub + Iy * vb + It) / D
        return np.stack([ub - Ix * r, vb - Iy * r, Ix, Iy, It]), state

    def backward(self, state, g):
        u, v, Ix, Iy, It = state
        gu, gv, gIx, gIy, gIt = g
        ub = avg4(u)
        vb = avg4(v)
        D = self.alpha2 + Ix * Ix + Iy * Iy
        N = Ix * ub + Iy * vb + It
        r = N / D

        gr = -(gu * Ix + gv * Iy)
        gN = gr / D
        gD = -gr * N / (D * D)
        gub = gu + gN * Ix
        gvb = gv + gN * Iy
        return np.stack([
            avg4T(gub),
            avg4T(gvb),
            gIx - gu * r + gN * ub + 2.0 * gD * Ix,
            gIy - gv * r + gN * vb + 2.0 * gD * Iy,
            gIt + gN,
        ])


class fpHSOut(fpStage):
    """ Solver state -> (H,W,2) flow """
    name = 'hs-out'

    def forward(self, state):
        return np.stack([state[0], state[1]], axis=2), state.shape

    def backward(self, shape, g):
        out = np.zeros(shape)
        out[0] = g[:, :, 0]
        out[1] = g[:, :, 1]
        return out


class hornSchunckEstimator(object):
    """
    Pluggable estimator: stages() yields the exact-gradient stages that map
      a stacked frame pair to a flow field
    """
    name = 'hs'

    def __init__(self, cfg=None):
        self.cfg = cfg or hsConfig()

    def stages(self):
        return ([fpHSPrep()] +
                [fpHSIter(self.cfg['alpha'])
                 for _ in range(self.cfg['iterations'])] +
                [fpHSOut()])

    def estimate(self, I1, I2, tape=None):
        """
        Flow from I1 to I2. With a tape, the stages are appended to it and
          the tape is run from the stacked pair.
        """
        I1 = asImage(I1)
        I2 = asImage(I2)
        if I1.shape != I2.shape:
            raise ShapeError('Frames differ in shape: %r vs %r' %
                             (I1.shape, I2.shape))
        if tape is None:
            tape = fpTape()
        elif len(tape):
            raise ValueError('estimate() needs an empty tape')
        tape.extend(self.stages())
        return tape.runForward(np.stack([I1, I2]))

    def __call__(self, I1, I2):
        return self.estimate(I1, I2)


ESTIMATORS = {
    hornSchunckEstimator.name: hornSchunckEstimator,
}


def makeEstimator(name='hs', **cfg):
    try:
        cls = ESTIMATORS[name]
    except KeyError:
        raise ConfigError('Unknown flow estimator %r' % (name,))
    return cls(hsConfig(**cfg))


def hornSchunck(I1, I2, cfg=None, tape=None):
    """ Unrolled Horn-Schunck flow from I1 to I2 """
    return hornSchunckEstimator(cfg).estimate(I1, I2, tape)


def estimatorBackward(tape, gflow):
    """
    Pull a flow cotangent back through a tape recorded by estimate(),
      returns (gI1, gI2)
    """
    g = tape.runBackward(asFlow(gflow))
    return g[0], g[1]
