""" Tests for EPE metrics, pipeline evaluation and tables """

import csv

import numpy as np
import pytest

from fpmetrics import (epe, epeExcl, evaluatePipeline, defenseSweep,
                       qualityRobustnessTable, writeRecords, writeTable,
                       writeScatter)
from fpattack import fpPatch, manualPatch
from fpdefense import defenseConfig
from fpflow import makeEstimator
from fpharness import synthPair
from fpdefs import *  # noqa: F403


def dataset(count=2, H=32, W=48):
    out = []
    for i in range(count):
        I1, I2, flow = synthPair(H, W, np.random.default_rng([5, i]))
        out.append({'frame': '%04d' % i, 'frame1': I1, 'frame2': I2,
                    'flow': flow, 'valid': None})
    return out


def record(defense, attack, q, r):
    return {'frame': '0000', 'defense': defense, 'attack': attack,
            'qualityEpe': q, 'robustnessEpe': r, 'attackedQualityEpe': None}


def test_epe_examples():
    f = np.random.default_rng(0).standard_normal((4, 5, 2))
    assert epe(f, f) == 0.0
    zero = np.zeros((3, 3, 2))
    other = np.zeros((3, 3, 2))
    other[:, :, 0] = 3.0
    other[:, :, 1] = 4.0
    assert epe(zero, other) == 5.0
    half = np.zeros((2, 2, 2))
    half[0, :, 0] = 1.0
    assert epe(np.zeros((2, 2, 2)), half) == 0.5


def test_epe_symmetric():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((6, 6, 2))
    b = rng.standard_normal((6, 6, 2))
    assert epe(a, b) == epe(b, a)


def test_epe_shape_mismatch():
    with pytest.raises(ShapeError):
        epe(np.zeros((2, 2, 2)), np.zeros((2, 3, 2)))


def test_epe_validity_mask():
    a = np.zeros((1, 2, 2))
    b = np.zeros((1, 2, 2))
    b[0, 1] = (0.0, 4.0)
    assert epe(a, b, np.array([[1, 0]])) == 0.0
    assert epe(a, b, np.array([[0, 1]])) == 4.0
    with pytest.raises(ValueError):
        epe(a, b, np.zeros((1, 2)))


def test_epe_excl_examples():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((5, 5, 2))
    b = rng.standard_normal((5, 5, 2))
    assert epeExcl(a, b, np.zeros((5, 5))) == epe(a, b)

    mask = np.zeros((5, 5), np.uint8)
    mask[1:3, 2:4] = 1
    c = a.copy()
    c[mask == 1] += 7.0
    assert epeExcl(a, c, mask) == 0.0

    x = np.zeros((2, 1, 2))
    y = np.zeros((2, 1, 2))
    y[1, 0] = (0.0, 2.0)
    y[0, 0] = (9.0, 9.0)
    assert epeExcl(x, y, np.array([[1], [0]])) == 2.0

    with pytest.raises(ValueError):
        epeExcl(a, b, np.ones((5, 5)))


def test_epe_excl_ignores_masked_changes():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((8, 8, 2))
    b = rng.standard_normal((8, 8, 2))
    mask = (rng.uniform(size=(8, 8)) < 0.3).astype(np.uint8)
    mask[0, 0] = 0
    ref = epeExcl(a, b, mask)
    for _ in range(1000):
        a2 = a.copy()
        b2 = b.copy()
        a2[mask == 1] = rng.standard_normal((int(mask.sum()), 2)) * 100
        b2[mask == 1] = rng.standard_normal((int(mask.sum()), 2)) * 100
        assert epeExcl(a2, b2, mask) == ref


def test_evaluate_without_patch():
    data = dataset()
    est = makeEstimator(iterations=10)
    records, agg = evaluatePipeline(est, None, None, data)
    assert len(records) == 2
    assert all(r['robustnessEpe'] is None for r in records)
    expect = np.mean([epe(d['flow'], est(d['frame1'], d['frame2']))
                      for d in data])
    assert np.isclose(agg['quality'], expect)
    assert agg['robustness'] is None
    assert agg['attack'] == ATTACK_NONE


def test_evaluate_needs_ground_truth():
    data = dataset(1)
    data[0]['flow'] = None
    est = makeEstimator(iterations=2)
    with pytest.raises(ValueError):
        evaluatePipeline(est, None, None, data)
    records, agg = evaluatePipeline(est, None, None, data, quality=False)
    assert agg['quality'] is None


def test_invisible_patch_has_zero_robustness():
    # constant frames and a patch of the same constant: compositing is a no-op
    frame = np.full((32, 48, 3), 0.5)
    data = [{'frame': '0000', 'frame1': frame, 'frame2': frame,
             'flow': np.zeros((32, 48, 2)), 'valid': None}]
    patch = fpPatch(np.full((8, 8, 3), 0.5))
    est = makeEstimator(iterations=5)
    records, agg = evaluatePipeline(est, defenseConfig(DEF_LGS, 8, 4), patch,
                                    data, attack=AWARE_VANILLA)
    assert records[0]['robustnessEpe'] == 0.0
    assert records[0]['attackedQualityEpe'] == records[0]['qualityEpe']


def test_evaluate_is_deterministic():
    data = dataset()
    est = makeEstimator(iterations=5)
    patch = manualPatch(8)
    r1, _ = evaluatePipeline(est, None, patch, data, seed=4,
                             attack=ATTACK_MANUAL)
    r2, _ = evaluatePipeline(est, None, patch, data, seed=4,
                             attack=ATTACK_MANUAL)
    assert r1 == r2
    assert all(r['robustnessEpe'] > 0 for r in r1)


def test_defense_sweep():
    data = dataset(1)
    est = makeEstimator(iterations=5)
    cfgs = [defenseConfig(DEF_LGS, 8, 4, thresh=t) for t in (0.1, 0.5)]
    rows = defenseSweep(est, cfgs, manualPatch(8), data)
    assert len(rows) == 2
    for row in rows:
        assert row['attackEpe'] >= 0 and row['benignEpe'] >= 0


def test_table_single_and_average():
    rows, scatter = qualityRobustnessTable([record('lgs', 'vanilla', 1.0,
                                                   2.0)])
    assert rows == [{'defense': 'lgs', 'attack': 'vanilla', 'quality': 1.0,
                     'robustness': 2.0, 'count': 1}]
    assert scatter == [{'quality': 1.0, 'robustness': 2.0,
                        'label': 'LGS/Van'}]

    rows, _ = qualityRobustnessTable([record('lgs', 'vanilla', 1.0, 2.0),
                                      record('lgs', 'vanilla', 3.0, 5.0)])
    assert rows[0]['quality'] == 2.0 and rows[0]['robustness'] == 3.5
    assert rows[0]['count'] == 2


def test_table_cells():
    recs = [record(d, a, 1.0, 1.0) for d in DEFENSE_KINDS
            for a in AWARENESS_KINDS]
    recs.reverse()
    rows, _ = qualityRobustnessTable(recs)
    assert len(rows) == 9
    assert (rows[0]['defense'], rows[0]['attack']) == (DEF_NONE,
                                                       AWARE_VANILLA)


def test_csv_output(tmp_path):
    recs = [record('none', 'none', 0.25, None)]
    writeRecords(recs, str(tmp_path / 'r.csv'), 'abc123')
    with open(str(tmp_path / 'r.csv')) as f:
        rows = list(csv.reader(f))
    assert rows[0] == list(RECORD_FIELDS)
    assert rows[1] == ['0000', 'none', 'none', '0.250000', '', '', 'abc123']

    table, scatter = qualityRobustnessTable(
        [record('ilp', 'ilp', 1.5, 2.5)])
    writeTable(table, str(tmp_path / 't.csv'), 'h')
    writeScatter(scatter, str(tmp_path / 's.csv'), 'h')
    lines = (tmp_path / 's.csv').read_text().splitlines()
    assert lines == ['quality,robustness,label,config_hash',
                     '1.500000,2.500000,ILP/ILP,h']
