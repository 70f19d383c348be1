""" Stage-wise reverse pass - part of flowpatch

Every pipeline step is an fpStage with a forward and a vector-Jacobian
product. An fpTape chains stages, keeps their saved contexts for one
forward evaluation and walks them back in reverse order.
"""

import logging

import numpy as np

from fpdefs import *  # noqa: F403

log = logging.getLogger(__name__)

# Dump every stage call with its shapes
debugTAPE = False


class fpStage(object):
    """
    One pipeline step. Subclasses override forward/backward; parameters
      are fixed at construction, per-call state lives in the context.
    """
    name = 'stage'
    kind = GRAD_EXACT

    def check(self, x):
        """ Raise ShapeError if x cannot be fed to this stage """
        pass

    def forward(self, x):
        """ Returns (output, context) """
        raise NotImplementedError

    def backward(self, ctx, g):
        """ Returns the cotangent of the input given output cotangent g """
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)[0]


class fpTape(object):
    """
    Ordered stages with saved contexts for one forward evaluation
    """
    def __init__(self, stages=None):
        self.stages = list(stages or [])
        self.ctx = None

    def append(self, stage):
        self.stages.append(stage)
        self.ctx = None

    def extend(self, stages):
        for s in stages:
            self.append(s)

    def __len__(self):
        return len(self.stages)

    def runForward(self, x):
        """
        Feed x through all stages, saving contexts for runBackward
        """
        ctx = []
        for s in self.stages:
            s.check(x)
            inShape = np.shape(x)
            x, c = s.forward(x)
            ctx.append((c, inShape))
            if debugTAPE:
                log.debug("[TAPE] fwd %-12s %r -> %r", s.name, inShape,
                          np.shape(x))
        self.ctx = ctx
        return x

    def runBackward(self, g):
        """
        Walk the stages in reverse, returns the cotangent of the tape input
        """
        if self.ctx is None:
            raise RuntimeError('runBackward called before runForward')

        for s, (c, inShape) in zip(reversed(self.stages),
                                   reversed(self.ctx)):
            g = s.backward(c, g)
            if np.shape(g) != inShape:
                raise ShapeError('%s backward returned %r, input was %r' %
                                 (s.name, np.shape(g), inShape))
            if debugTAPE:
                log.debug("[TAPE] bwd %-12s -> %r", s.name, np.shape(g))
        return g


def runForward(tape, x):
    return tape.runForward(x)


def runBackward(tape, g):
    return tape.runBackward(g)


#
# Elementwise stages
#

class fpScale(fpStage):
    """ y = k*x """
    name = 'scale'

    def __init__(self, k):
        self.k = float(k)

    def forward(self, x):
        return self.k * np.asarray(x, dtype=np.float64), None

    def backward(self, ctx, g):
        return self.k * np.asarray(g, dtype=np.float64)


class fpClip(fpStage):
    """ y = clip(x, lo, hi); derivative 1 inside, 0 outside """
    name = 'clip'

    def __init__(self, lo=0.0, hi=1.0):
        self.lo = lo
        self.hi = hi

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        inside = (x >= self.lo) & (x <= self.hi)
        return np.clip(x, self.lo, self.hi), inside

    def backward(self, inside, g):
        return np.where(inside, g, 0.0)


class fpTanh(fpStage):
    name = 'tanh'

    def forward(self, x):
        y = np.tanh(np.asarray(x, dtype=np.float64))
        return y, y

    def backward(self, y, g):
        return g * (1.0 - y * y)


class fpCoV(fpStage):
    """ Change of variables P = (tanh(w)+1)/2 """
    name = 'cov'

    def forward(self, w):
        t = np.tanh(np.asarray(w, dtype=np.float64))
        return 0.5 * (t + 1.0), t

    def backward(self, t, g):
        return 0.5 * g * (1.0 - t * t)


class fpPairMap(fpStage):
    """
    Apply a single-raster stage to each entry of a stacked pair (2,...)
    """
    def __init__(self, stage):
        self.stage = stage
        self.name = 'pair:' + stage.name
        self.kind = stage.kind

    def check(self, x):
        if np.ndim(x) < 1 or np.shape(x)[0] != 2:
            raise ShapeError('%s expects a stacked pair, got %r' %
                             (self.name, np.shape(x)))
        self.stage.check(x[0])

    def forward(self, x):
        y0, c0 = self.stage.forward(x[0])
        y1, c1 = self.stage.forward(x[1])
        return np.stack([y0, y1]), (c0, c1)

    def backward(self, ctx, g):
        return np.stack([self.stage.backward(ctx[0], g[0]),
                         self.stage.backward(ctx[1], g[1])])


#
# Finite-difference checker
#

def gradCheck(stage, x, h=1e-4, tol=1e-4, samples=64, seed=0):
    """
    Compare stage.backward against central finite differences of
      <g, stage(x)> for a random cotangent g.
    At most `samples` input coordinates are checked.
    Returns a report dict: maxErr, passed, checked
    """
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)

    y, ctx = stage.forward(x)
    g = rng.standard_normal(np.shape(y))
    vjp = np.asarray(stage.backward(ctx, g), dtype=np.float64)

    flat = x.reshape(-1)
    if flat.size <= samples:
        coords = np.arange(flat.size)
    else:
        coords = np.sort(rng.choice(flat.size, size=samples, replace=False))

    maxErr = 0.0
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = np.sum(g * stage(xp.reshape(x.shape)))
        fm = np.sum(g * stage(xm.reshape(x.shape)))
        fd = (fp - fm) / (2 * h)
        err = abs(vjp.reshape(-1)[i] - fd) / max(1.0, abs(fd))
        maxErr = max(maxErr, err)

    passed = bool(maxErr <= tol)
    log.debug("[GRAD] %s: %d coords, max rel err %.3g (%s)", stage.name,
              len(coords), maxErr, 'ok' if passed else 'FAIL')
    return {'maxErr': maxErr, 'passed': passed, 'checked': len(coords)}
