""" Adversarial patch attacks - part of flowpatch

A patch is a square raster with a circular validity mask. It is pasted
into both frames at the same pose (a static patch, zero true motion) and
optimized to invert the flow outside its own footprint, optionally through
a defense and with a derivative penalty that keeps it below the defense's
detection threshold.
"""

import csv
import json
import logging
import math

import numpy as np
from tqdm import tqdm

from fpcore import asImage, asFlow, asMask, sameShape, readPPM, writePPM
from fpcore import diffFwd, diffFwdT, laplaceLinear, laplaceLinearT
from fpdiff import fpStage, fpTape, fpCoV, fpPairMap
from fpdefense import defenseStage
from fpdefs import *  # noqa: F403

log = logging.getLogger(__name__)

# Log every training step instead of every 50th
debugSTEP = False


def attackConfig(awareness=AWARE_VANILLA, optimizer=OPT_IFGSM,
                 learningRate=0.01, box=BOX_CLIP, steps=TRAIN_STEPS,
                 alphaPenalty=ALPHA_PENALTY, seed=0, patchSide=PATCH_SIDE):
    """ Build a validated attack config dict """
    cfg = {
        'awareness': awareness,
        'optimizer': optimizer,
        'learningRate': float(learningRate),
        'box': box,
        'steps': int(steps),
        'alphaPenalty': float(alphaPenalty),
        'seed': int(seed),
        'patchSide': int(patchSide),
    }
    if awareness not in AWARENESS_KINDS:
        raise ConfigError('Unknown awareness %r' % (awareness,))
    if optimizer not in (OPT_IFGSM, OPT_SGD):
        raise ConfigError('Unknown optimizer %r' % (optimizer,))
    if box not in (BOX_CLIP, BOX_COV):
        raise ConfigError('Unknown box constraint %r' % (box,))
    if cfg['learningRate'] < 0:
        raise ConfigError('Learning rate must not be negative')
    if cfg['steps'] < 1:
        raise ConfigError('Training needs at least one step')
    if cfg['alphaPenalty'] < 0:
        raise ConfigError('Penalty weight must not be negative')
    if cfg['patchSide'] < 2:
        raise ConfigError('Patch side must be at least 2')
    return cfg


#
# Patch model
#

def circleMask(side):
    """
    Pixels strictly closer than side/2 to the center pixel (side//2, side//2).
      The same center maps onto the pose center in placementPlan.
    """
    c = side // 2
    r = side / 2.0
    i = np.arange(side)
    d2 = (i[:, None] - c) ** 2 + (i[None, :] - c) ** 2
    return (d2 < r * r).astype(np.uint8)


class fpPatch(object):
    """
    Square patch. data holds the values (box=clip) or the unconstrained
      logits w with values (tanh(w)+1)/2 (box=cov).
    """
    def __init__(self, data, box=BOX_CLIP):
        data = np.array(data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] != data.shape[1] or \
                data.shape[2] != 3:
            raise ShapeError('Patch data must be SxSx3, got %r' %
                             (data.shape,))
        if box not in (BOX_CLIP, BOX_COV):
            raise ConfigError('Unknown box constraint %r' % (box,))
        self.data = data
        self.box = box
        self.side = data.shape[0]

    def values(self):
        if self.box == BOX_COV:
            return fpCoV()(self.data)
        return self.data.copy()

    def valid(self):
        return circleMask(self.side)


def patchFromValues(values, box=BOX_CLIP):
    values = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if box == BOX_COV:
        w = np.arctanh(np.clip(2.0 * values - 1.0, -1.0, 1.0) *
                       math.tanh(COV_W_MAX))
        return fpPatch(w, BOX_COV)
    return fpPatch(values, BOX_CLIP)


def randomPatch(side, box=BOX_CLIP, rng=None):
    """ Uniform random values in [0,1] per pixel and channel """
    if rng is None:
        rng = np.random.default_rng(0)
    return patchFromValues(rng.uniform(0.0, 1.0, (side, side, 3)), box)


def manualPatch(side, cell=1):
    """ Black/white checkerboard with cells of `cell` pixels """
    if side < 2 or not 1 <= cell <= side / 2.0:
        raise ConfigError('Need side >= 2 and 1 <= cell <= side/2')
    i = np.arange(side) // cell
    board = ((i[:, None] + i[None, :]) % 2).astype(np.float64)
    return fpPatch(np.repeat(board[:, :, None], 3, axis=2), BOX_CLIP)


def savePatch(patch, path, meta=None):
    """ Patch as PPM plus a JSON sidecar next to it """
    writePPM(patch.values(), path)
    side = {'side': patch.side, 'box': patch.box}
    side.update(meta or {})
    with open(sidecarPath(path), 'w') as f:
        json.dump(side, f, indent=1, sort_keys=True)


def loadPatch(path):
    values = readPPM(path)
    box = BOX_CLIP
    try:
        with open(sidecarPath(path)) as f:
            box = json.load(f).get('box', BOX_CLIP)
    except IOError:
        log.warning("[PATCH] no sidecar for %s, assuming %s", path, box)
    return patchFromValues(values, box)


def sidecarPath(path):
    path = str(path)
    if path.endswith('.ppm'):
        path = path[:-4]
    return path + '.json'


#
# Placement
#

def posePlaceable(shape, side, pose):
    H, W = shape[:2]
    R = 0.5 * side * pose['scale']
    r, c = pose['center']
    return r - R >= 0 and c - R >= 0 and r + R <= H - 1 and c + R <= W - 1


def samplePose(rng, shape, side):
    """
    Random center among valid integer positions, rotation U[-10,10] deg,
      scale U[0.95,1.05]
    """
    H, W = shape[:2]
    rotation = float(rng.uniform(*ROT_RANGE))
    scale = float(rng.uniform(*SCALE_RANGE))
    R = 0.5 * side * scale
    lo = int(math.ceil(R))
    hiR, hiC = int(math.floor(H - 1 - R)), int(math.floor(W - 1 - R))
    if hiR < lo or hiC < lo:
        raise PlacementError('Patch of side %d does not fit a %dx%d image' %
                             (side, H, W))
    center = (int(rng.integers(lo, hiR + 1)), int(rng.integers(lo, hiC + 1)))
    return {'center': center, 'rotation': rotation, 'scale': scale}


def identityPose(center):
    return {'center': tuple(center), 'rotation': 0.0, 'scale': 1.0}


def placementPlan(shape, side, pose):
    """
    Sampling plan of a patch under pose: footprint pixels, the four
      bilinear source pixels each and their normalized weights
    """
    if not posePlaceable(shape, side, pose):
        raise PlacementError('Footprint of %r leaves the %dx%d image' %
                             (pose, shape[0], shape[1]))
    H, W = shape[:2]
    half = side / 2.0
    mid = side // 2
    R = half * pose['scale']
    cr, cc = pose['center']

    rows = np.arange(max(0, int(math.floor(cr - R))),
                     min(H, int(math.ceil(cr + R)) + 1))
    cols = np.arange(max(0, int(math.floor(cc - R))),
                     min(W, int(math.ceil(cc + R)) + 1))
    pr, pc = np.meshgrid(rows, cols, indexing='ij')
    pr = pr.reshape(-1)
    pc = pc.reshape(-1)

    theta = math.radians(pose['rotation'])
    cos, sin = math.cos(theta), math.sin(theta)
    dy = (pr - cr).astype(np.float64)
    dx = (pc - cc).astype(np.float64)
    # integer offsets land on integer raster points at the identity pose
    qy = (cos * dy + sin * dx) / pose['scale'] + mid
    qx = (-sin * dy + cos * dx) / pose['scale'] + mid

    inside = (qy - mid) ** 2 + (qx - mid) ** 2 < half * half
    pr, pc, qy, qx = pr[inside], pc[inside], qy[inside], qx[inside]

    y0 = np.floor(qy).astype(np.int64)
    x0 = np.floor(qx).astype(np.int64)
    fy = qy - y0
    fx = qx - x0
    cy = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)
    cx = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)
    w = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx,
                  fy * (1 - fx), fy * fx], axis=1)

    valid = circleMask(side)
    inRaster = (cy >= 0) & (cy < side) & (cx >= 0) & (cx < side)
    cy = np.clip(cy, 0, side - 1)
    cx = np.clip(cx, 0, side - 1)
    w = np.where(inRaster & (valid[cy, cx] == 1), w, 0.0)

    wsum = w.sum(axis=1)
    keep = wsum > 0
    pr, pc, cy, cx = pr[keep], pc[keep], cy[keep], cx[keep]
    w = w[keep] / wsum[keep][:, None]

    mask = np.zeros((H, W), dtype=np.uint8)
    mask[pr, pc] = 1
    return {'rows': pr, 'cols': pc, 'srcRows': cy, 'srcCols': cx,
            'weights': w, 'mask': mask, 'side': side}


class fpPlace(fpStage):
    """
    Patch values -> stacked pair with the patch composited into both
      frames. Linear in the patch values.
    """
    name = 'place'

    def __init__(self, pair, plan):
        self.pair = pair
        self.plan = plan

    def check(self, x):
        s = self.plan['side']
        if np.shape(x) != (s, s, self.pair.shape[3]):
            raise ShapeError('%s expects a %dx%d patch, got %r' %
                             (self.name, s, s, np.shape(x)))

    def forward(self, P):
        p = self.plan
        vals = np.einsum('nk,nkc->nc', p['weights'],
                         P[p['srcRows'], p['srcCols']])
        out = self.pair.copy()
        out[:, p['rows'], p['cols']] = vals
        return out, P.shape

    def backward(self, shape, g):
        p = self.plan
        gv = g[0][p['rows'], p['cols']] + g[1][p['rows'], p['cols']]
        gP = np.zeros(shape)
        for k in range(4):
            np.add.at(gP, (p['srcRows'][:, k], p['srcCols'][:, k]),
                      p['weights'][:, k, None] * gv)
        return gP


def placePatch(I1, I2, patch, pose):
    """
    Composite the patch into both frames at the same pose,
      returns (J1, J2, footprint mask)
    """
    I1 = asImage(I1)
    I2 = asImage(I2)
    if I1.shape != I2.shape:
        raise ShapeError('Frames differ in shape')
    plan = placementPlan(I1.shape, patch.side, pose)
    out = fpPlace(np.stack([I1, I2]), plan)(patch.values())
    return out[0], out[1], plan['mask']


#
# Losses
#

class fpACS(fpStage):
    """
    Average cosine similarity between a fixed reference flow and the
      input flow over pixels outside the patch mask
    """
    name = 'acs'

    def __init__(self, fRef, mask=None):
        self.fRef = asFlow(fRef)
        if mask is None:
            mask = np.zeros(self.fRef.shape[:2], dtype=np.uint8)
        self.mask = asMask(mask)
        sameShape(self.fRef, self.mask, 'flow and patch mask')
        self.count = int(np.sum(self.mask == 0))
        if self.count == 0:
            raise ValueError('Patch mask covers every pixel')

    def check(self, x):
        if np.shape(x) != self.fRef.shape:
            raise ShapeError('%s expects flow %r, got %r' %
                             (self.name, self.fRef.shape, np.shape(x)))

    def forward(self, fAdv):
        f = self.fRef
        n1 = np.sqrt(np.sum(f * f, axis=2))
        n2 = np.sqrt(np.sum(fAdv * fAdv, axis=2))
        ok = (n1 >= ZERO_FLOW_EPS) & (n2 >= ZERO_FLOW_EPS) & (self.mask == 0)
        n1s = np.where(ok, n1, 1.0)
        n2s = np.where(ok, n2, 1.0)
        cos = np.where(ok, np.sum(f * fAdv, axis=2) / (n1s * n2s), 0.0)
        cos = np.clip(cos, -1.0, 1.0)
        return np.float64(cos.sum() / self.count), (fAdv, ok, n1s, n2s, cos)

    def backward(self, ctx, g):
        fAdv, ok, n1s, n2s, cos = ctx
        d = (self.fRef / (n1s * n2s)[:, :, None] -
             (cos / (n2s * n2s))[:, :, None] * fAdv)
        return np.where(ok[:, :, None], d, 0.0) * (float(g) / self.count)


def acsLoss(f, fAdv, patchMask=None):
    """ Mean cosine similarity of f and fAdv outside the patch mask """
    return float(fpACS(f, patchMask)(asFlow(fAdv)))


class fpPenalty(fpStage):
    """
    Sum over the patch of per-channel derivative magnitudes:
      first: sqrt(Px^2+Py^2), second: |laplace P|
    """
    def __init__(self, order, side):
        if order not in (GRAD_FIRST, GRAD_SECOND):
            raise ConfigError('Unknown derivative order %r' % (order,))
        self.order = order
        self.region = circleMask(side)[:, :, None]
        self.name = 'penalty:' + order

    def forward(self, P):
        if self.order == GRAD_FIRST:
            px = diffFwd(P, 1)
            py = diffFwd(P, 0)
            G = np.sqrt(px * px + py * py)
            return np.float64(np.sum(G * self.region)), (px, py, G)
        L = laplaceLinear(P)
        return np.float64(np.sum(np.abs(L) * self.region)), L

    def backward(self, ctx, g):
        g = float(g)
        if self.order == GRAD_FIRST:
            px, py, G = ctx
            safe = np.where(G > 0, G, 1.0)
            gG = g * self.region * (G > 0)
            return diffFwdT(gG * px / safe, 1) + diffFwdT(gG * py / safe, 0)
        return laplaceLinearT(g * self.region * np.sign(ctx))


def patchPenalty(patch, order):
    return float(fpPenalty(order, patch.side)(patch.values()))


def attackLoss(f, fAdv, patch, cfg, patchMask=None):
    """
    vanilla: ACS;  lgs: ACS + alpha*||grad P||;  ilp: ACS + alpha*||laplace P||
    """
    loss = acsLoss(f, fAdv, patchMask)
    order = AWARE_PENALTY[cfg['awareness']]
    if order is not None and cfg['alphaPenalty'] != 0:
        loss += cfg['alphaPenalty'] * patchPenalty(patch, order)
    return loss


#
# Optimization
#

def optimizerStep(patch, grad, cfg):
    """
    One descent step on the patch parameter (values for clip, w for cov)
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != patch.data.shape:
        raise ShapeError('Gradient %r does not match patch %r' %
                         (grad.shape, patch.data.shape))
    lr = cfg['learningRate']
    if cfg['optimizer'] == OPT_IFGSM:
        data = patch.data - lr * np.sign(grad)
    else:
        data = patch.data - lr * grad

    if patch.box == BOX_CLIP:
        data = np.clip(data, 0.0, 1.0)
    else:
        data = np.clip(data, -COV_W_MAX, COV_W_MAX)
    return fpPatch(data, patch.box)


def cleanFlow(estimator, dstage, I1, I2):
    """ Flow of the (defended) unattacked pair """
    J1, _ = dstage.forward(asImage(I1))
    J2, _ = dstage.forward(asImage(I2))
    return estimator(J1, J2)


def trainPatch(estimator, defense, dataset, cfg, progress=False):
    """
    Optimize a patch against estimator, through defense if given.
    dataset is a list of dicts with 'frame1' and 'frame2' images.
    Returns (patch, history)
    """
    if not dataset:
        raise ValueError('Training needs at least one frame pair')
    rng = np.random.default_rng(cfg['seed'])
    side = cfg['patchSide']
    patch = randomPatch(side, cfg['box'], rng)
    dstage = defenseStage(defense)
    order = AWARE_PENALTY[cfg['awareness']]
    penalty = fpPenalty(order, side) if order else None
    alpha = cfg['alphaPenalty']
    refs = {}
    history = []

    log.info("[TRAIN] %s/%s lr=%g box=%s steps=%d seed=%d defense=%s",
             cfg['awareness'], cfg['optimizer'], cfg['learningRate'],
             cfg['box'], cfg['steps'], cfg['seed'], dstage.name)

    for step in tqdm(range(cfg['steps']), disable=not progress,
                     desc='patch', leave=False):
        k = int(rng.integers(len(dataset)))
        I1 = asImage(dataset[k]['frame1'])
        I2 = asImage(dataset[k]['frame2'])
        pose = samplePose(rng, I1.shape, side)
        if k not in refs:
            refs[k] = cleanFlow(estimator, dstage, I1, I2)
        plan = placementPlan(I1.shape, side, pose)

        if patch.box == BOX_COV:
            cov = fpCoV()
            P, cCov = cov.forward(patch.data)
        else:
            P = patch.data

        tape = fpTape([fpPlace(np.stack([I1, I2]), plan), fpPairMap(dstage)])
        tape.extend(estimator.stages())
        tape.append(fpACS(refs[k], plan['mask']))
        acs = float(tape.runForward(P))
        gP = tape.runBackward(1.0)

        pen = 0.0
        if penalty is not None:
            pv, cPen = penalty.forward(P)
            pen = float(pv)
            gP = gP + alpha * penalty.backward(cPen, 1.0)

        loss = acs + alpha * pen
        if not np.isfinite(loss) or not np.all(np.isfinite(gP)):
            raise DivergenceError('Loss diverged at step %d (acs=%r, '
                                  'penalty=%r, lr=%g, %s)' %
                                  (step, acs, pen, cfg['learningRate'],
                                   cfg['optimizer']))

        if patch.box == BOX_COV:
            gP = cov.backward(cCov, gP)
        patch = optimizerStep(patch, gP, cfg)

        history.append({'step': step, 'loss': loss, 'acs': acs,
                        'penalty': pen})
        if debugSTEP or step % 50 == 0:
            log.debug("[TRAIN] step %d frame %d loss %.6f acs %.6f pen %.3f",
                      step, k, loss, acs, pen)

    return patch, history


def writeLossLog(history, path):
    with open(path, 'w', newline='') as f:
        w = csv.writer(f)
        w.writerow(['step', 'loss', 'acs', 'penalty'])
        for h in history:
            w.writerow([h['step'], '%.9f' % h['loss'], '%.9f' % h['acs'],
                        '%.6f' % h['penalty']])
