""" Flow quality and robustness metrics - part of flowpatch

Quality compares a pipeline's unattacked flow with ground truth over all
(valid) pixels. Robustness compares the unattacked and attacked flow of the
same pipeline, leaving out the pixels covered by the patch.

A dataset is a list of dicts:
  frame    id string
  frame1   Image
  frame2   Image
  flow     ground truth FlowField or None
  valid    PixelMask of valid ground truth pixels or None
"""

import csv
import logging

import numpy as np

from fpcore import asFlow, asMask, sameShape
from fpattack import placePatch, samplePose, cleanFlow
from fpdefense import defenseStage
from fpdefs import *  # noqa: F403

log = logging.getLogger(__name__)


def endpointErrors(fA, fB):
    fA = asFlow(fA)
    fB = asFlow(fB)
    if fA.shape != fB.shape:
        raise ShapeError('Flow fields differ: %r vs %r' % (fA.shape, fB.shape))
    d = fA - fB
    return np.sqrt(d[:, :, 0] ** 2 + d[:, :, 1] ** 2)


def epe(fRef, f, valid=None):
    """
    Average endpoint error. With a validity mask only pixels where it is
      1 are averaged.
    """
    err = endpointErrors(fRef, f)
    if valid is None:
        return float(err.reshape(-1).sum() / err.size)
    valid = asMask(valid)
    sameShape(err, valid, 'flow and validity mask')
    n = int(valid.sum())
    if n == 0:
        raise ValueError('Validity mask has no valid pixel')
    return float(err[valid == 1].sum() / n)


def epeExcl(fA, fB, patchMask):
    """ Average endpoint error over the pixels outside the patch mask """
    err = endpointErrors(fA, fB)
    patchMask = asMask(patchMask)
    sameShape(err, patchMask, 'flow and patch mask')
    keep = patchMask == 0
    n = int(keep.sum())
    if n == 0:
        raise ValueError('Patch mask covers every pixel')
    return float(err[keep].sum() / n)


def _mean(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    return float(sum(values) / len(values))


def frameRng(seed, index):
    """ Pose generator of one evaluation frame """
    return np.random.default_rng([int(seed), int(index)])


def evaluatePipeline(estimator, defense, patch, dataset, seed=0,
                     attack=None, quality=True):
    """
    Evaluate one defended pipeline on a dataset, optionally under a patch
      attack. Each frame gets its own seeded random pose.
    Returns (records, aggregate)
    """
    if attack is None:
        attack = ATTACK_NONE if patch is None else AWARE_VANILLA
    dstage = defenseStage(defense)
    dname = DEF_NONE if defense is None else defense['kind']
    records = []

    for i, entry in enumerate(dataset):
        gt = entry.get('flow')
        if quality and gt is None:
            raise ValueError('Frame %s has no ground truth flow' %
                             entry['frame'])
        fD = cleanFlow(estimator, dstage, entry['frame1'], entry['frame2'])
        rec = {'frame': entry['frame'], 'defense': dname, 'attack': attack,
               'qualityEpe': None, 'robustnessEpe': None,
               'attackedQualityEpe': None}
        if gt is not None:
            rec['qualityEpe'] = epe(gt, fD, entry.get('valid'))

        if patch is not None:
            I1 = entry['frame1']
            pose = samplePose(frameRng(seed, i), np.shape(I1), patch.side)
            J1, J2, footprint = placePatch(I1, entry['frame2'], patch, pose)
            fDA = cleanFlow(estimator, dstage, J1, J2)
            rec['robustnessEpe'] = epeExcl(fD, fDA, footprint)
            if gt is not None:
                rec['attackedQualityEpe'] = epe(gt, fDA, entry.get('valid'))

        log.debug("[EVAL] %s %s/%s Q=%s R=%s", rec['frame'], dname, attack,
                  rec['qualityEpe'], rec['robustnessEpe'])
        records.append(rec)

    aggregate = {
        'defense': dname,
        'attack': attack,
        'quality': _mean(r['qualityEpe'] for r in records),
        'robustness': _mean(r['robustnessEpe'] for r in records),
        'attackedQuality': _mean(r['attackedQualityEpe'] for r in records),
        'count': len(records),
    }
    return records, aggregate


def defenseSweep(estimator, defenseCfgs, patch, dataset, seed=0):
    """
    Per defense config: EPE of the undefended clean flow against the
      defended attacked flow, and against the defended clean flow
    """
    none = defenseStage(None)
    clean = [cleanFlow(estimator, none, e['frame1'], e['frame2'])
             for e in dataset]
    rows = []
    for cfg in defenseCfgs:
        dstage = defenseStage(cfg)
        attackErr = []
        benignErr = []
        for i, entry in enumerate(dataset):
            fD = cleanFlow(estimator, dstage, entry['frame1'], entry['frame2'])
            pose = samplePose(frameRng(seed, i), np.shape(entry['frame1']),
                              patch.side)
            J1, J2, _ = placePatch(entry['frame1'], entry['frame2'], patch,
                                   pose)
            fDA = cleanFlow(estimator, dstage, J1, J2)
            attackErr.append(epe(clean[i], fDA))
            benignErr.append(epe(clean[i], fD))
        rows.append({'defense': cfg, 'attackEpe': _mean(attackErr),
                     'benignEpe': _mean(benignErr)})
        log.info("[EVAL] sweep %r: attack %.4f benign %.4f", cfg,
                 rows[-1]['attackEpe'], rows[-1]['benignEpe'])
    return rows


def _cellOrder(key):
    defense, attack = key
    dIdx = DEFENSE_KINDS.index(defense) if defense in DEFENSE_KINDS else 99
    aOrder = (ATTACK_NONE,) + AWARENESS_KINDS + (ATTACK_MANUAL,)
    aIdx = aOrder.index(attack) if attack in aOrder else 99
    return (dIdx, defense, aIdx, attack)


def qualityRobustnessTable(records):
    """
    One row per (defense, attack) cell with mean quality, mean robustness
      and record count; plus scatter rows (quality, robustness, label)
    """
    cells = {}
    for r in records:
        cells.setdefault((r['defense'], r['attack']), []).append(r)

    rows = []
    scatter = []
    for key in sorted(cells, key=_cellOrder):
        recs = cells[key]
        row = {
            'defense': key[0],
            'attack': key[1],
            'quality': _mean(r['qualityEpe'] for r in recs),
            'robustness': _mean(r['robustnessEpe'] for r in recs),
            'count': len(recs),
        }
        rows.append(row)
        if row['quality'] is not None and row['robustness'] is not None:
            scatter.append({
                'quality': row['quality'],
                'robustness': row['robustness'],
                'label': '%s/%s' % (DEFENSE_NAME.get(key[0], key[0]),
                                    ATTACK_NAME.get(key[1], key[1])),
            })
    return rows, scatter


#
# CSV output
#

def fmtCell(v):
    if v is None:
        return ''
    if isinstance(v, float):
        return '%.6f' % v
    return str(v)


RECORD_KEYS = {
    'quality_epe': 'qualityEpe',
    'robustness_epe': 'robustnessEpe',
    'attacked_quality_epe': 'attackedQualityEpe',
    'config_hash': 'configHash',
}


def writeCsv(path, header, rows):
    """ rows are lists already in header order """
    with open(path, 'w', newline='') as f:
        w = csv.writer(f, lineterminator='\n')
        w.writerow(header)
        for row in rows:
            w.writerow([fmtCell(v) for v in row])


def writeRecords(records, path, configHash=None):
    out = []
    for r in records:
        r = dict(r)
        if configHash is not None:
            r['configHash'] = configHash
        out.append([r.get(RECORD_KEYS.get(k, k)) for k in RECORD_FIELDS])
    writeCsv(path, RECORD_FIELDS, out)


def writeTable(rows, path, configHash=None):
    header = ('defense', 'attack', 'quality', 'robustness', 'count',
              'config_hash')
    writeCsv(path, header,
             [[r['defense'], r['attack'], r['quality'], r['robustness'],
               r['count'], configHash] for r in rows])


def writeScatter(scatter, path, configHash=None):
    writeCsv(path, ('quality', 'robustness', 'label', 'config_hash'),
             [[s['quality'], s['robustness'], s['label'], configHash]
              for s in scatter])
