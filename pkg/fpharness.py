""" Datasets and experiment grid - part of flowpatch

Builds synthetic frame pairs with known flow, indexes frame directories,
and runs the defense x attack experiment: one patch per grid cell and
seed, each evaluated against every defense, with seed averages and the
strongest configuration per (defense, attack) written as CSV.
"""

import hashlib
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from fpcore import readFlo, writeFlo, readPPM, writePPM
from fpflow import makeEstimator
from fpdefense import defenseConfig
from fpattack import (attackConfig, trainPatch, manualPatch, savePatch,
                      writeLossLog)
from fpmetrics import (evaluatePipeline, qualityRobustnessTable, writeCsv,
                       writeRecords, writeTable, writeScatter)
from fpdefs import *  # noqa: F403

log = logging.getLogger(__name__)

FRAME_RE = re.compile(r'^(\d{4})_([12])\.ppm$')
FLOW_RE = re.compile(r'^(\d{4})\.flo$')
VALID_RE = re.compile(r'^(\d{4})_valid\.ppm$')

PER_SEED_FIELDS = ('cell', 'awareness', 'optimizer', 'learning_rate', 'box',
                   'seed', 'defense', 'quality', 'robustness',
                   'attacked_quality', 'status', 'config_hash')
SEED_MEAN_FIELDS = ('cell', 'awareness', 'optimizer', 'learning_rate', 'box',
                    'defense', 'quality', 'robustness', 'attacked_quality',
                    'seeds', 'status', 'config_hash')
HEADLINE_FIELDS = ('defense', 'attack', 'quality', 'robustness', 'cell',
                   'config_hash')


def configHash(obj):
    """ 12 hex digits of the SHA-1 of the canonical JSON form """
    text = json.dumps(obj, sort_keys=True, separators=(',', ':'))
    return hashlib.sha1(text.encode('utf-8')).hexdigest()[:12]


#
# Configuration
#

def experimentConfig(**overrides):
    """
    Experiment config dict with desk-scale defaults. Every attack cell of
      the grid is validated up front.
    """
    cfg = {
        'dataset': None,
        'synth': {'trainCount': 4, 'testCount': 4, 'height': FRAME_HEIGHT,
                  'width': FRAME_WIDTH, 'seed': 0},
        'estimator': {'name': 'hs', 'alpha': HS_ALPHA,
                      'iterations': HS_ITERS},
        'defenses': [{'kind': k} for k in DEFENSE_KINDS],
        'awareness': list(AWARENESS_KINDS),
        'optimizers': [OPT_IFGSM],
        'learningRates': {k: list(v) for k, v in LR_GRID.items()},
        'boxes': [BOX_CLIP],
        'seeds': list(SEEDS),
        'steps': TRAIN_STEPS,
        'alphaPenalty': ALPHA_PENALTY,
        'patchSide': PATCH_SIDE,
        'manual': True,
        'manualCell': 1,
        'workers': os.cpu_count() or 1,
        'outdir': 'runs/experiment',
    }
    for k, v in overrides.items():
        if k not in cfg:
            raise ConfigError('Unknown experiment field %r' % (k,))
        if v is None and k != 'dataset':
            continue
        if isinstance(cfg[k], dict) and isinstance(v, dict):
            cfg[k] = dict(cfg[k], **v)
        else:
            cfg[k] = v

    defenseCfgs(cfg)
    makeEstimator(**cfg['estimator'])
    if not cfg['seeds']:
        raise ConfigError('Experiment needs at least one seed')
    if not gridCells(cfg):
        raise ConfigError('Attack grid is empty')
    if int(cfg['workers']) < 1:
        raise ConfigError('Need at least one worker')
    return cfg


def loadExperimentConfig(path, **overrides):
    """ JSON config file, then overrides on top """
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ConfigError('%s: top level must be an object' % path)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return experimentConfig(**data)


def defenseCfgs(cfg):
    """ Validated defense configs keyed by kind, in grid order """
    out = {}
    for d in cfg['defenses']:
        d = defenseConfig(**d)
        if d['kind'] in out:
            raise ConfigError('Defense %r listed twice' % d['kind'])
        out[d['kind']] = d
    return out


def gridCells(cfg):
    """ Attack configs of every cell for seed 0, in a stable order """
    cells = []
    for awareness in cfg['awareness']:
        for opt in cfg['optimizers']:
            for lr in cfg['learningRates'].get(opt, ()):
                for box in cfg['boxes']:
                    cells.append(attackConfig(
                        awareness=awareness, optimizer=opt,
                        learningRate=lr, box=box, steps=cfg['steps'],
                        alphaPenalty=cfg['alphaPenalty'],
                        patchSide=cfg['patchSide']))
    return cells


def cellLabel(acfg):
    return '%s-%s-%g-%s' % (acfg['awareness'], acfg['optimizer'],
                            acfg['learningRate'], acfg['box'])


def hashedConfig(cfg):
    """ The fields that decide the numbers; output dir and workers do not """
    return {k: v for k, v in cfg.items() if k not in ('outdir', 'workers')}


def workerCount(cfg):
    n = int(cfg['workers'])
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            log.warning("[GRID] ignoring %s=%r", WORKERS_ENV, env)
    return n


#
# Synthetic scenes
#

def _texture(rng, height, width, nblobs):
    """ Random smooth colour field: a gradient plus Gaussian blobs """
    grad = rng.uniform(-0.5, 0.5, (2, 3)) / max(height, width)
    base = rng.uniform(-0.3, 0.3, 3)
    blobs = []
    for _ in range(nblobs):
        blobs.append((rng.uniform(0, height), rng.uniform(0, width),
                      rng.uniform(3.0, 8.0), rng.uniform(-1.0, 1.0, 3)))

    def render(y, x):
        val = base + y[..., None] * grad[0] + x[..., None] * grad[1]
        for cy, cx, sigma, amp in blobs:
            w = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * sigma * sigma))
            val = val + w[..., None] * amp
        return 0.5 + 0.45 * np.tanh(val)
    return render


def synthPair(height, width, rng, bgShift=None, fgShift=None,
              foreground=True):
    """
    Two frames and the flow between them. The background and an optional
      elliptic foreground move by their own translation, U[-1,1] per axis
      unless given as (u, v).
    Returns (frame1, frame2, flow)
    """
    bg = _texture(rng, height, width, max(4, height * width // 400))
    if bgShift is None:
        bgShift = tuple(rng.uniform(-1.0, 1.0, 2))
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)

    I1 = bg(y, x)
    I2 = bg(y - bgShift[1], x - bgShift[0])
    flow = np.empty((height, width, 2))
    flow[:, :, 0] = bgShift[0]
    flow[:, :, 1] = bgShift[1]

    if foreground:
        fg = _texture(rng, height, width, 6)
        if fgShift is None:
            fgShift = tuple(rng.uniform(-1.0, 1.0, 2))
        cy = rng.uniform(0.3, 0.7) * height
        cx = rng.uniform(0.3, 0.7) * width
        ry = rng.uniform(0.15, 0.3) * height
        rx = rng.uniform(0.1, 0.2) * width

        def inside(yy, xx):
            return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0

        m1 = inside(y, x)
        m2 = inside(y - fgShift[1], x - fgShift[0])
        I1 = np.where(m1[..., None], fg(y, x), I1)
        I2 = np.where(m2[..., None],
                      fg(y - fgShift[1], x - fgShift[0]), I2)
        flow[m1] = fgShift
    return I1, I2, flow


def synthDataset(outdir, count, height=FRAME_HEIGHT, width=FRAME_WIDTH,
                 seed=0, patchSide=PATCH_SIDE):
    """
    Write count synthetic pairs as NNNN_1.ppm, NNNN_2.ppm, NNNN.flo,
      deterministic per seed. Returns outdir.
    """
    need = int(math.ceil(patchSide * SCALE_RANGE[1])) + 2
    if height < need or width < need:
        raise ConfigError('Frames of %dx%d cannot hold a patch of side %d' %
                          (height, width, patchSide))
    os.makedirs(outdir, exist_ok=True)
    for i in range(count):
        rng = np.random.default_rng([int(seed), i])
        I1, I2, flow = synthPair(height, width, rng)
        base = os.path.join(outdir, '%04d' % i)
        writePPM(I1, base + '_1.ppm')
        writePPM(I2, base + '_2.ppm')
        writeFlo(flow, base + '.flo')
    log.info("[SYNTH] %d pairs of %dx%d in %s (seed %d)", count, width,
             height, outdir, seed)
    return outdir


#
# Ingestion
#

def ingestDataset(root):
    """
    Index NNNN_1.ppm / NNNN_2.ppm pairs with optional NNNN.flo and
      NNNN_valid.ppm. Broken or incomplete pairs are skipped and reported.
    Returns (index, report)
    """
    found = {}
    for name in sorted(os.listdir(root)):
        path = os.path.join(root, name)
        m = FRAME_RE.match(name)
        if m:
            found.setdefault(m.group(1), {})['frame' + m.group(2)] = path
            continue
        m = FLOW_RE.match(name)
        if m:
            found.setdefault(m.group(1), {})['flow'] = path
            continue
        m = VALID_RE.match(name)
        if m:
            found.setdefault(m.group(1), {})['valid'] = path

    index = []
    report = []
    for fid in sorted(found):
        files = found[fid]
        missing = [k for k in ('frame1', 'frame2') if k not in files]
        if missing:
            report.append({'frame': fid,
                           'reason': 'missing %s' % ', '.join(missing)})
            continue
        entry = {'frame': fid, 'frame1': files['frame1'],
                 'frame2': files['frame2'], 'flow': files.get('flow'),
                 'valid': files.get('valid')}
        try:
            loadEntry(entry)
        except (IOError, EOFError, ValueError) as e:
            report.append({'frame': fid, 'reason': str(e)})
            continue
        index.append(entry)

    for r in report:
        log.warning("[INGEST] %s: skipped, %s", r['frame'], r['reason'])
    if not index:
        log.warning("[INGEST] no usable frame pairs in %s", root)
    else:
        log.info("[INGEST] %d pairs from %s, %d with ground truth", len(index),
                 root, sum(1 for e in index if e['flow']))
    return index, report


def loadEntry(entry):
    """ Read the rasters behind one index entry """
    I1 = readPPM(entry['frame1'])
    I2 = readPPM(entry['frame2'])
    if I1.shape != I2.shape:
        raise ShapeError('frames differ in size')
    out = {'frame': entry['frame'], 'frame1': I1, 'frame2': I2,
           'flow': None, 'valid': None}
    if entry.get('flow'):
        out['flow'] = readFlo(entry['flow'])
        if out['flow'].shape[:2] != I1.shape[:2]:
            raise ShapeError('ground truth flow differs in size')
    if entry.get('valid'):
        valid = readPPM(entry['valid'])
        if valid.shape[:2] != I1.shape[:2]:
            raise ShapeError('validity mask differs in size')
        out['valid'] = (valid[:, :, 0] > 0.5).astype(np.uint8)
    return out


def loadDataset(index):
    return [loadEntry(e) for e in index]


#
# Experiment
#

def runJob(job):
    """
    Train one patch and evaluate it against every defense. Never raises:
      failures come back as status div or fail.
    """
    acfg = job['attack']
    label = '%s s%d' % (job['cell'], acfg['seed'])
    out = {'cell': job['cell'], 'attack': acfg, 'hash': job['hash'],
           'status': 'ok', 'evals': []}
    try:
        estimator = makeEstimator(**job['estimator'])
        kind = AWARE_DEFENSE[acfg['awareness']]
        trainDefense = job['defenses'].get(kind) or defenseConfig(kind)
        patch, history = trainPatch(estimator, trainDefense, job['train'],
                                    acfg)
        base = os.path.join(job['patchDir'], '%s_s%d' % (job['cell'],
                                                         acfg['seed']))
        savePatch(patch, base + '.ppm', {'attack': acfg,
                                         'configHash': job['hash']})
        writeLossLog(history, base + '_loss.csv')
        for kind, dcfg in job['defenses'].items():
            _, agg = evaluatePipeline(estimator, dcfg, patch, job['test'],
                                      seed=acfg['seed'],
                                      attack=acfg['awareness'],
                                      quality=job['quality'])
            out['evals'].append(agg)
    except DivergenceError as e:
        log.warning("[GRID] %s diverged: %s", label, e)
        out['status'] = CELL_DIVERGED
    except Exception:
        log.exception("[GRID] %s failed", label)
        out['status'] = CELL_FAILED
    return out


def prepareData(cfg):
    """ (train, test) datasets, synthesized under outdir if none is given """
    if cfg['dataset']:
        index, _ = ingestDataset(cfg['dataset'])
        data = loadDataset(index)
        return data, data
    s = cfg['synth']
    root = os.path.join(cfg['outdir'], 'data')
    train = synthDataset(os.path.join(root, 'train'), s['trainCount'],
                         s['height'], s['width'], s['seed'], cfg['patchSide'])
    test = synthDataset(os.path.join(root, 'test'), s['testCount'],
                        s['height'], s['width'], s['seed'] + 1,
                        cfg['patchSide'])
    return (loadDataset(ingestDataset(train)[0]),
            loadDataset(ingestDataset(test)[0]))


def runExperiment(cfg):
    """
    Run the full grid and write the output tree under cfg['outdir'].
    Returns a summary dict with the output dir and failure counts.
    """
    expHash = configHash(hashedConfig(cfg))
    outdir = cfg['outdir']
    patchDir = os.path.join(outdir, 'patches')
    os.makedirs(patchDir, exist_ok=True)
    with open(os.path.join(outdir, 'config.json'), 'w') as f:
        json.dump(cfg, f, indent=1, sort_keys=True)

    train, test = prepareData(cfg)
    if not train or not test:
        raise ValueError('Experiment has no usable frame pairs')
    quality = all(e['flow'] is not None for e in test)
    defenses = defenseCfgs(cfg)
    estimator = makeEstimator(**cfg['estimator'])

    records = []
    for kind, dcfg in defenses.items():
        recs, _ = evaluatePipeline(estimator, dcfg, None, test,
                                   quality=quality)
        records.extend(recs)
    if cfg['manual']:
        man = manualPatch(cfg['patchSide'], cfg['manualCell'])
        for kind, dcfg in defenses.items():
            recs, _ = evaluatePipeline(estimator, dcfg, man, test,
                                       seed=cfg['seeds'][0],
                                       attack=ATTACK_MANUAL, quality=quality)
            records.extend(recs)

    jobs = []
    for cell in gridCells(cfg):
        label = cellLabel(cell)
        for seed in cfg['seeds']:
            acfg = dict(cell, seed=int(seed))
            jobs.append({
                'cell': label, 'attack': acfg,
                'hash': configHash({'experiment': expHash, 'attack': acfg}),
                'estimator': cfg['estimator'], 'defenses': defenses,
                'train': train, 'test': test, 'quality': quality,
                'patchDir': patchDir,
            })

    workers = min(workerCount(cfg), len(jobs))
    log.info("[GRID] %d jobs (%d cells x %d seeds) on %d workers", len(jobs),
             len(jobs) // len(cfg['seeds']), len(cfg['seeds']), workers)
    results = collectJobs(jobs, workers)

    writeRecords(records, os.path.join(outdir, 'records.csv'), expHash)
    rows, _ = qualityRobustnessTable(records)
    writeTable(rows, os.path.join(outdir, 'quality.csv'), expHash)

    perSeed = seedRows(results)
    writeCsv(os.path.join(outdir, 'per_seed.csv'), PER_SEED_FIELDS,
             [[r[k] for k in PER_SEED_FIELDS] for r in perSeed])
    means = seedMeans(perSeed, list(defenses), expHash)
    writeCsv(os.path.join(outdir, 'seed_mean.csv'), SEED_MEAN_FIELDS,
             [[r[k] for k in SEED_MEAN_FIELDS] for r in means])

    head = headline(means, rows, list(defenses), cfg['awareness'], expHash)
    writeCsv(os.path.join(outdir, 'headline.csv'), HEADLINE_FIELDS,
             [[r[k] for k in HEADLINE_FIELDS] for r in head])
    scatter = [{'quality': r['quality'], 'robustness': r['robustness'],
                'label': '%s/%s' % (DEFENSE_NAME[r['defense']],
                                    ATTACK_NAME[r['attack']])}
               for r in head
               if r['quality'] is not None and r['robustness'] is not None]
    writeScatter(scatter, os.path.join(outdir, 'scatter.csv'), expHash)

    summary = {
        'outdir': outdir,
        'configHash': expHash,
        'jobs': len(results),
        'diverged': sum(1 for r in results if r['status'] == CELL_DIVERGED),
        'failed': sum(1 for r in results if r['status'] == CELL_FAILED),
    }
    log.info("[GRID] done: %d jobs, %d diverged, %d failed", summary['jobs'],
             summary['diverged'], summary['failed'])
    return summary


def collectJobs(jobs, workers):
    """ Results in job order; a dead worker marks only its own job """
    if workers <= 1:
        return [runJob(j) for j in jobs]
    results = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(runJob, j) for j in jobs]
        for job, fut in zip(jobs, futures):
            try:
                results.append(fut.result())
            except Exception:
                log.exception("[GRID] worker for %s died", job['cell'])
                results.append({'cell': job['cell'], 'attack': job['attack'],
                                'hash': job['hash'], 'status': CELL_FAILED,
                                'evals': []})
    return results


def seedRows(results):
    """ One row per job and defense; failed jobs get one status row """
    rows = []
    for res in results:
        a = res['attack']
        base = {'cell': res['cell'], 'awareness': a['awareness'],
                'optimizer': a['optimizer'], 'learning_rate': a['learningRate'],
                'box': a['box'], 'seed': a['seed'], 'status': res['status'],
                'config_hash': res['hash']}
        if not res['evals']:
            rows.append(dict(base, defense='', quality=None, robustness=None,
                             attacked_quality=None))
            continue
        for ev in res['evals']:
            rows.append(dict(base, defense=ev['defense'],
                             quality=ev['quality'],
                             robustness=ev['robustness'],
                             attacked_quality=ev['attackedQuality']))
    return rows


def _avg(values):
    values = [v for v in values if v is not None]
    return float(sum(values) / len(values)) if values else None


def seedMeans(perSeed, defenses, expHash):
    """
    Average the ok seeds of every (cell, defense). A cell without any ok
      seed keeps the status of its first seed and no numbers.
    """
    cells = []
    byCell = {}
    for r in perSeed:
        if r['cell'] not in byCell:
            cells.append(r['cell'])
            byCell[r['cell']] = []
        byCell[r['cell']].append(r)

    out = []
    for cell in cells:
        rows = byCell[cell]
        first = rows[0]
        for d in defenses:
            ok = [r for r in rows if r['status'] == 'ok' and r['defense'] == d]
            status = 'ok' if ok else first['status']
            out.append({
                'cell': cell, 'awareness': first['awareness'],
                'optimizer': first['optimizer'],
                'learning_rate': first['learning_rate'], 'box': first['box'],
                'defense': d,
                'quality': _avg(r['quality'] for r in ok),
                'robustness': _avg(r['robustness'] for r in ok),
                'attacked_quality': _avg(r['attacked_quality'] for r in ok),
                'seeds': len(ok), 'status': status,
                'config_hash': configHash({'experiment': expHash,
                                           'cell': cell}),
            })
    return out


def headline(means, qualityRows, defenses, awareness, expHash):
    """
    Per defense: the quality row, the strongest cell of every attack
      awareness (largest mean robustness) and the manual patch if present
    """
    baseQ = {r['defense']: r['quality'] for r in qualityRows
             if r['attack'] == ATTACK_NONE}
    manual = {r['defense']: r['robustness'] for r in qualityRows
              if r['attack'] == ATTACK_MANUAL}
    out = []
    for d in defenses:
        out.append({'defense': d, 'attack': ATTACK_NONE,
                    'quality': baseQ.get(d), 'robustness': None, 'cell': '',
                    'config_hash': expHash})
        for a in awareness:
            cands = [m for m in means if m['defense'] == d and
                     m['awareness'] == a and m['robustness'] is not None]
            if cands:
                best = max(cands, key=lambda m: m['robustness'])
                out.append({'defense': d, 'attack': a,
                            'quality': baseQ.get(d),
                            'robustness': best['robustness'],
                            'cell': best['cell'],
                            'config_hash': best['config_hash']})
            else:
                status = next((m['status'] for m in means
                               if m['defense'] == d and m['awareness'] == a),
                              CELL_FAILED)
                out.append({'defense': d, 'attack': a,
                            'quality': baseQ.get(d), 'robustness': None,
                            'cell': status, 'config_hash': expHash})
        if d in manual:
            out.append({'defense': d, 'attack': ATTACK_MANUAL,
                        'quality': baseQ.get(d), 'robustness': manual[d],
                        'cell': ATTACK_MANUAL, 'config_hash': expHash})
    return out
