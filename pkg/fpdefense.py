""" LGS and ILP detect-and-remove defenses - part of flowpatch

Both defenses mark blocks with large normalized image derivatives and then
remove the marked pixels: LGS darkens them, ILP reevaluates the candidates
pixel-wise and fills them by fast-marching inpainting.

The forward pass is the real defense. Backward passes follow the BPDA
rules: block voting and ILP thresholding pass the cotangent through, the
LGS clip passes it where the clipped value lies in [0,1], and inpainting
passes it on non-inpainted pixels only.
"""

import heapq
import logging

import numpy as np

from fpcore import (asImage, asMask, asGradMap, sameShape, toGray, toGrayT,
                    diffFwd, diffFwdT, laplace5, laplace5T)
from fpdiff import fpStage, fpClip
from fpdefs import *  # noqa: F403

log = logging.getLogger(__name__)

# Dump fast marching progress
debugFMM = False

NEIGHBOURS4 = ((-1, 0), (1, 0), (0, -1), (0, 1))


def defenseConfig(kind=DEF_LGS, blockSize=BLOCK_SIZE, overlap=BLOCK_OVERLAP,
                  thresh=BLOCK_THRESH, bLgs=B_LGS, sIlp=S_ILP, tIlp=T_ILP,
                  rTelea=R_TELEA):
    """
    Build a validated defense config dict
    """
    if kind not in DEFENSE_KINDS:
        raise ConfigError('Unknown defense %r' % (kind,))
    cfg = {
        'kind': kind,
        'blockSize': int(blockSize),
        'overlap': int(overlap),
        'thresh': float(thresh),
        'bLgs': float(bLgs),
        'sIlp': float(sIlp),
        'tIlp': float(tIlp),
        'rTelea': int(rTelea),
    }
    if not 0 < cfg['overlap'] < cfg['blockSize']:
        raise ConfigError('Need 0 < O < K, got K=%d O=%d' %
                          (cfg['blockSize'], cfg['overlap']))
    if not 0.0 <= cfg['thresh'] <= 1.0:
        raise ConfigError('Block threshold t must be in [0,1]')
    if not 0.0 <= cfg['tIlp'] <= 1.0:
        raise ConfigError('t_ILP must be in [0,1]')
    if cfg['bLgs'] <= 0 or cfg['sIlp'] <= 0:
        raise ConfigError('b_LGS and s_ILP must be positive')
    if cfg['rTelea'] < 1:
        raise ConfigError('Telea radius must be >= 1')
    return cfg


#
# Detection
#

class fpGradMag(fpStage):
    """
    Image -> derivative magnitude of its grayscale.
      first:  sqrt(Ix^2 + Iy^2), forward differences
      second: |5-point Laplacian|
    Replicate boundaries; subgradient 0 where the magnitude is 0.
    """
    def __init__(self, order=GRAD_FIRST):
        if order not in (GRAD_FIRST, GRAD_SECOND):
            raise ConfigError('Unknown derivative order %r' % (order,))
        self.order = order
        self.name = 'gradmag:' + order

    def check(self, x):
        if np.ndim(x) != 3:
            raise ShapeError('%s expects HxWxC, got %r' %
                             (self.name, np.shape(x)))

    def forward(self, img):
        gray = toGray(img)
        if self.order == GRAD_FIRST:
            gx = diffFwd(gray, 1)
            gy = diffFwd(gray, 0)
            G = np.sqrt(gx * gx + gy * gy)
            return G, (img.shape[2], gx, gy, G)
        L = laplace5(gray)
        return np.abs(L), (img.shape[2], L)

    def backward(self, ctx, g):
        if self.order == GRAD_FIRST:
            channels, gx, gy, G = ctx
            safe = np.where(G > 0, G, 1.0)
            wx = np.where(G > 0, gx / safe, 0.0)
            wy = np.where(G > 0, gy / safe, 0.0)
            gGray = diffFwdT(g * wx, 1) + diffFwdT(g * wy, 0)
        else:
            channels, L = ctx
            gGray = laplace5T(g * np.sign(L))
        return toGrayT(gGray, channels)


class fpNormalize(fpStage):
    """ (G - min) / (max - min); all zeros for a constant map """
    name = 'normalize'

    def forward(self, G):
        G = np.asarray(G, dtype=np.float64)
        a = int(np.argmin(G))
        b = int(np.argmax(G))
        lo = G.flat[a]
        span = G.flat[b] - lo
        if span == 0:
            return np.zeros_like(G), None
        y = (G - lo) / span
        return y, (a, b, span, y)

    def backward(self, ctx, g):
        g = np.asarray(g, dtype=np.float64)
        if ctx is None:
            return np.zeros_like(g)
        a, b, span, y = ctx
        out = g / span
        out.flat[a] += np.sum(g * (y - 1.0)) / span
        out.flat[b] -= np.sum(g * y) / span
        return out


class fpBlockVote(fpStage):
    """ Block voting on the normalized map; backward is the identity """
    name = 'blockvote'
    kind = GRAD_BPDA

    def __init__(self, blockSize, overlap, thresh):
        self.blockSize = blockSize
        self.overlap = overlap
        self.thresh = thresh

    def forward(self, Gbar):
        return blockVoteMask(Gbar, self.blockSize, self.overlap,
                             self.thresh), None

    def backward(self, ctx, g):
        return g


class fpIlpThresh(fpStage):
    """ Candidate reevaluation indicator [s*G > t]; identity backward """
    name = 'ilpthresh'
    kind = GRAD_BPDA

    def __init__(self, sIlp, tIlp):
        self.sIlp = sIlp
        self.tIlp = tIlp

    def forward(self, Gbar):
        return (self.sIlp * np.asarray(Gbar) > self.tIlp).astype(np.uint8), None

    def backward(self, ctx, g):
        return g


class fpClipBPDA(fpClip):
    """ clip to [0,1]; identity backward where the value is in [0,1] """
    name = 'clip-bpda'
    kind = GRAD_BPDA


class fpTelea(fpStage):
    """ Inpainting of a fixed mask; gradient only on non-inpainted pixels """
    name = 'telea'
    kind = GRAD_BPDA

    def __init__(self, mask, radius=R_TELEA):
        self.mask = asMask(mask)
        self.radius = radius

    def forward(self, img):
        return teleaInpaint(img, self.mask, self.radius), None

    def backward(self, ctx, g):
        return g * (1 - self.mask)[:, :, None]


def gradientMagnitude(image, order=GRAD_FIRST):
    """ G = ||grad I|| (first) or |laplace I| (second) of the grayscale """
    return fpGradMag(order)(asImage(image))


def normalizeMap(G):
    """ Per-image min/max normalization of a gradient map """
    return fpNormalize()(asGradMap(G))


def blockStarts(n, blockSize, overlap):
    """
    Block origins along one axis: stride K-O, last block clamped to the
      border so every index is covered
    """
    if blockSize > n:
        raise ConfigError('Block size %d exceeds image side %d' %
                          (blockSize, n))
    starts = list(range(0, n - blockSize + 1, blockSize - overlap))
    if starts[-1] + blockSize < n:
        starts.append(n - blockSize)
    return starts


def blockVoteMask(Gbar, blockSize=BLOCK_SIZE, overlap=BLOCK_OVERLAP,
                  thresh=BLOCK_THRESH):
    """
    Mark every pixel that lies in at least one KxK block whose mean
      normalized gradient is strictly above thresh
    """
    if not 0 < overlap < blockSize:
        raise ConfigError('Need 0 < O < K, got K=%d O=%d' %
                          (blockSize, overlap))
    G = asGradMap(Gbar)
    H, W = G.shape
    K = blockSize
    mask = np.zeros((H, W), dtype=np.uint8)
    for r in blockStarts(H, K, overlap):
        for c in blockStarts(W, K, overlap):
            if G[r:r + K, c:c + K].sum() / (K * K) > thresh:
                mask[r:r + K, c:c + K] = 1
    return mask


def ilpReevaluate(M, GbarIlp, sIlp=S_ILP, tIlp=T_ILP):
    """ M_ILP = M * [s_ILP * G_ILP > t_ILP] """
    M = asMask(M)
    G = asGradMap(GbarIlp)
    sameShape(M, G, 'mask and gradient map')
    return M * fpIlpThresh(sIlp, tIlp)(G)


def lgsSmooth(I, Gbar, M, bLgs=B_LGS):
    """ I * (1 - clip(b_LGS * G * M)), shared factor for all channels """
    I = asImage(I)
    G = asGradMap(Gbar)
    M = asMask(M)
    sameShape(I, G, 'image and gradient map')
    sameShape(I, M, 'image and mask')
    c = fpClipBPDA()(bLgs * G * M)
    return I * (1.0 - c)[:, :, None]


#
# Telea inpainting by the fast marching method
#

def _solveEikonal(T, flags, i1, j1, i2, j2):
    H, W = T.shape
    k1 = 0 <= i1 < H and 0 <= j1 < W and flags[i1, j1] == FMM_KNOWN
    k2 = 0 <= i2 < H and 0 <= j2 < W and flags[i2, j2] == FMM_KNOWN
    if k1 and k2:
        t1, t2 = T[i1, j1], T[i2, j2]
        d = abs(t1 - t2)
        if d < 1.0:
            return 0.5 * (t1 + t2 + np.sqrt(2.0 - d * d))
        return 1.0 + min(t1, t2)
    if k1:
        return 1.0 + T[i1, j1]
    if k2:
        return 1.0 + T[i2, j2]
    return FMM_INF


def _arrivalTime(T, flags, i, j):
    return min(_solveEikonal(T, flags, i - 1, j, i, j - 1),
               _solveEikonal(T, flags, i + 1, j, i, j - 1),
               _solveEikonal(T, flags, i - 1, j, i, j + 1),
               _solveEikonal(T, flags, i + 1, j, i, j + 1))


def _levelGradient(T, flags, i, j):
    H, W = T.shape

    def usable(k, l):
        return 0 <= k < H and 0 <= l < W and flags[k, l] != FMM_INSIDE

    grad = []
    for (pk, pl), (nk, nl) in (((i, j - 1), (i, j + 1)),
                               ((i - 1, j), (i + 1, j))):
        if usable(pk, pl) and usable(nk, nl):
            grad.append(0.5 * (T[nk, nl] - T[pk, pl]))
        elif usable(nk, nl):
            grad.append(T[nk, nl] - T[i, j])
        elif usable(pk, pl):
            grad.append(T[i, j] - T[pk, pl])
        else:
            grad.append(0.0)
    return grad[1], grad[0]     # (d/drow, d/dcol)


def _fillPixel(out, T, flags, i, j, radius):
    """
    Normalized weighted average of the known pixels within radius:
      weight = directional * 1/d^2 * 1/(1+|dT|)
    """
    H, W = T.shape
    gy, gx = _levelGradient(T, flags, i, j)

    r0, r1 = max(0, i - radius), min(H, i + radius + 1)
    c0, c1 = max(0, j - radius), min(W, j + radius + 1)
    ry = (i - np.arange(r0, r1))[:, None].astype(np.float64)
    rx = (j - np.arange(c0, c1))[None, :].astype(np.float64)
    d2 = ry * ry + rx * rx

    sel = (flags[r0:r1, c0:c1] != FMM_INSIDE) & (d2 <= radius * radius)
    sel &= d2 > 0
    d2 = np.where(sel, d2, 1.0)
    dist = np.sqrt(d2)

    direc = (ry * gy + rx * gx) / dist
    direc = np.where(np.abs(direc) <= 0.01, 1e-6, direc)
    lev = 1.0 / (1.0 + np.abs(T[r0:r1, c0:c1] - T[i, j]))
    w = np.where(sel, np.abs(direc * lev / d2), 0.0)

    total = w.sum()
    return np.tensordot(w, out[r0:r1, c0:c1], axes=([0, 1], [0, 1])) / total


def teleaInpaint(I, M, radius=R_TELEA):
    """
    Fill masked pixels in increasing distance from the mask boundary.
    Ties in arrival time are broken in row-major order.
    """
    I = asImage(I)
    M = asMask(M)
    sameShape(I, M, 'image and mask')
    if M.all():
        raise ValueError('Inpainting mask covers the whole image')

    out = I.copy()
    if not M.any():
        return out

    H, W = M.shape
    inside = M.astype(bool)
    flags = np.where(inside, FMM_INSIDE, FMM_KNOWN).astype(np.int8)
    T = np.where(inside, FMM_INF, 0.0)

    # narrow band: known pixels touching the mask
    touch = np.zeros_like(inside)
    touch[1:, :] |= inside[:-1, :]
    touch[:-1, :] |= inside[1:, :]
    touch[:, 1:] |= inside[:, :-1]
    touch[:, :-1] |= inside[:, 1:]
    heap = []
    for i, j in zip(*np.nonzero(touch & ~inside)):
        flags[i, j] = FMM_BAND
        heap.append((0.0, int(i), int(j)))
    heapq.heapify(heap)

    filled = 0
    while heap:
        _, i, j = heapq.heappop(heap)
        flags[i, j] = FMM_KNOWN
        for di, dj in NEIGHBOURS4:
            k, l = i + di, j + dj
            if not (0 <= k < H and 0 <= l < W):
                continue
            if flags[k, l] != FMM_INSIDE:
                continue
            T[k, l] = _arrivalTime(T, flags, k, l)
            out[k, l] = _fillPixel(out, T, flags, k, l, radius)
            flags[k, l] = FMM_BAND
            heapq.heappush(heap, (T[k, l], k, l))
            filled += 1
            if debugFMM:
                log.debug("[FMM] fill (%d,%d) T=%.3f", k, l, T[k, l])

    log.debug("[FMM] inpainted %d pixels, radius %d", filled, radius)
    return out


#
# Full defenses
#

class fpLGS(fpStage):
    """ Local gradient smoothing with BPDA backward """
    name = 'lgs'
    kind = GRAD_BPDA

    def __init__(self, cfg):
        self.cfg = cfg
        self.gradMag = fpGradMag(GRAD_FIRST)
        self.normalize = fpNormalize()
        self.vote = fpBlockVote(cfg['blockSize'], cfg['overlap'],
                                cfg['thresh'])
        self.clip = fpClipBPDA()

    def check(self, x):
        self.gradMag.check(x)

    def forward(self, img):
        b = self.cfg['bLgs']
        G, cG = self.gradMag.forward(img)
        Gbar, cN = self.normalize.forward(G)
        M, cV = self.vote.forward(Gbar)
        c, cC = self.clip.forward(b * Gbar * M)
        out = img * (1.0 - c)[:, :, None]
        return out, (img, Gbar, M, c, cG, cN, cV, cC)

    def backward(self, ctx, g):
        img, Gbar, M, c, cG, cN, cV, cC = ctx
        b = self.cfg['bLgs']
        gI = g * (1.0 - c)[:, :, None]
        gz = self.clip.backward(cC, -np.sum(g * img, axis=2))
        gGbar = gz * b * M + self.vote.backward(cV, gz * b * Gbar)
        return gI + self.gradMag.backward(cG, self.normalize.backward(cN, gGbar))

    @staticmethod
    def mask(ctx):
        return ctx[2]


class fpILP(fpStage):
    """ Inpainting with Laplacian prior with BPDA backward """
    name = 'ilp'
    kind = GRAD_BPDA

    def __init__(self, cfg):
        self.cfg = cfg
        self.gradMag = fpGradMag(GRAD_SECOND)
        self.normalize = fpNormalize()
        self.vote = fpBlockVote(cfg['blockSize'], cfg['overlap'],
                                cfg['thresh'])
        self.thresh = fpIlpThresh(cfg['sIlp'], cfg['tIlp'])

    def check(self, x):
        self.gradMag.check(x)

    def forward(self, img):
        G, _ = self.gradMag.forward(img)
        Gbar, _ = self.normalize.forward(G)
        M, _ = self.vote.forward(Gbar)
        Milp = M * self.thresh(Gbar)
        inpaint = fpTelea(Milp, self.cfg['rTelea'])
        out, _ = inpaint.forward(img)
        return out, inpaint

    def backward(self, inpaint, g):
        return inpaint.backward(None, g)

    @staticmethod
    def mask(ctx):
        return ctx.mask


class fpNoDefense(fpStage):
    name = 'none'

    def forward(self, img):
        return img, None

    def backward(self, ctx, g):
        return g

    @staticmethod
    def mask(ctx):
        return None


def defenseStage(cfg):
    """ Stage for a defense config (None means undefended) """
    if cfg is None or cfg['kind'] == DEF_NONE:
        return fpNoDefense()
    if cfg['kind'] == DEF_LGS:
        return fpLGS(cfg)
    return fpILP(cfg)


def defend(I, cfg):
    """
    Run a defense on one image, returns (defended image, final mask)
    """
    I = asImage(I)
    stage = defenseStage(cfg)
    out, ctx = stage.forward(I)
    mask = stage.mask(ctx)
    if mask is None:
        mask = np.zeros(I.shape[:2], dtype=np.uint8)
    log.debug("[DEF] %s: %d of %d pixels masked", stage.name,
              int(mask.sum()), mask.size)
    return out, mask
