""" Tests for synthetic data, ingestion and the experiment grid """

import csv
import json
import logging
import os

import numpy as np
import pytest

import fpharness
from fpharness import (configHash, experimentConfig, loadExperimentConfig,
                       synthPair, synthDataset, ingestDataset, loadDataset,
                       runExperiment, headline, workerCount, gridCells)
from fpcore import writePPM
from fpflow import hornSchunck
from fpmetrics import epe
from fpdefs import *  # noqa: F403


def tinyConfig(outdir, **over):
    cfg = dict(
        synth={'trainCount': 2, 'testCount': 2, 'height': 32, 'width': 48,
               'seed': 0},
        estimator={'name': 'hs', 'alpha': 15.0, 'iterations': 5},
        defenses=[{'kind': DEF_NONE},
                  {'kind': DEF_LGS, 'blockSize': 8, 'overlap': 4},
                  {'kind': DEF_ILP, 'blockSize': 8, 'overlap': 4}],
        awareness=[AWARE_VANILLA, AWARE_LGS],
        optimizers=[OPT_IFGSM],
        learningRates={OPT_IFGSM: [0.1]},
        seeds=[0],
        steps=2,
        patchSide=8,
        workers=1,
        outdir=str(outdir),
    )
    cfg.update(over)
    return experimentConfig(**cfg)


def readCsv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_config_hash():
    h = configHash({'b': 1, 'a': [1, 2]})
    assert len(h) == 12
    assert h == configHash({'a': [1, 2], 'b': 1})
    assert h != configHash({'a': [1, 2], 'b': 2})


def test_experiment_config_defaults():
    cfg = experimentConfig()
    assert cfg['patchSide'] == PATCH_SIDE
    assert cfg['steps'] == TRAIN_STEPS
    assert cfg['seeds'] == [0, 1]
    assert len(gridCells(cfg)) == 3 * 3


def test_experiment_config_errors():
    with pytest.raises(ConfigError):
        experimentConfig(colour='red')
    with pytest.raises(ConfigError):
        experimentConfig(steps=0)
    with pytest.raises(ConfigError):
        experimentConfig(defenses=[{'kind': DEF_LGS, 'overlap': 20}])
    with pytest.raises(ConfigError):
        experimentConfig(seeds=[])


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / 'exp.json'
    path.write_text(json.dumps({'steps': 7, 'patchSide': 10,
                                'synth': {'trainCount': 1}}))
    cfg = loadExperimentConfig(str(path), steps=9, outdir=None)
    assert cfg['steps'] == 9
    assert cfg['patchSide'] == 10
    assert cfg['synth']['trainCount'] == 1
    assert cfg['synth']['height'] == FRAME_HEIGHT


def test_worker_env_cap(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, '2')
    assert workerCount({'workers': 8}) == 2
    monkeypatch.setenv(WORKERS_ENV, 'many')
    assert workerCount({'workers': 3}) == 3


def test_global_shift_flow_is_constant():
    I1, I2, flow = synthPair(20, 30, np.random.default_rng(0),
                             bgShift=(1.0, 0.0), foreground=False)
    assert np.all(flow[:, :, 0] == 1.0) and np.all(flow[:, :, 1] == 0.0)
    # frame 2 is frame 1 moved one pixel to the right
    assert np.allclose(I2[:, 1:], I1[:, :-1])


def test_synth_files(tmp_path):
    synthDataset(str(tmp_path / 'a'), 1, 32, 48, seed=3)
    assert sorted(os.listdir(str(tmp_path / 'a'))) == \
        ['0000.flo', '0000_1.ppm', '0000_2.ppm']
    synthDataset(str(tmp_path / 'b'), 1, 32, 48, seed=3)
    for name in os.listdir(str(tmp_path / 'a')):
        assert (tmp_path / 'a' / name).read_bytes() == \
            (tmp_path / 'b' / name).read_bytes()


def test_synth_too_small(tmp_path):
    with pytest.raises(ConfigError):
        synthDataset(str(tmp_path), 1, 16, 16, patchSide=24)


def test_horn_schunck_quality_on_synthetic_pair():
    I1, I2, flow = synthPair(FRAME_HEIGHT, FRAME_WIDTH,
                             np.random.default_rng([0, 0]))
    assert epe(flow, hornSchunck(I1, I2)) < 1.0


def test_ingest_empty(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        index, report = ingestDataset(str(tmp_path))
    assert index == [] and report == []
    assert 'no usable frame pairs' in caplog.text


def test_ingest_complete_and_broken(tmp_path):
    synthDataset(str(tmp_path), 3, 32, 48)
    os.remove(str(tmp_path / '0001_2.ppm'))
    (tmp_path / '0002.flo').write_bytes(b'garbage')
    writePPM(np.ones((32, 48, 3)), str(tmp_path / '0000_valid.ppm'))

    index, report = ingestDataset(str(tmp_path))
    assert [e['frame'] for e in index] == ['0000']
    assert sorted(r['frame'] for r in report) == ['0001', '0002']
    assert 'frame2' in [r for r in report if r['frame'] == '0001'][0]['reason']

    data = loadDataset(index)
    assert data[0]['flow'].shape == (32, 48, 2)
    assert data[0]['valid'].all()


def test_headline_picks_strongest():
    means = [
        {'cell': 'a', 'awareness': AWARE_VANILLA, 'defense': DEF_NONE,
         'robustness': 1.0, 'status': 'ok', 'config_hash': 'ha'},
        {'cell': 'b', 'awareness': AWARE_VANILLA, 'defense': DEF_NONE,
         'robustness': 3.0, 'status': 'ok', 'config_hash': 'hb'},
        {'cell': 'c', 'awareness': AWARE_LGS, 'defense': DEF_NONE,
         'robustness': None, 'status': CELL_DIVERGED, 'config_hash': 'hc'},
    ]
    quality = [{'defense': DEF_NONE, 'attack': ATTACK_NONE, 'quality': 0.5,
                'robustness': None, 'count': 2}]
    rows = headline(means, quality, [DEF_NONE],
                    [AWARE_VANILLA, AWARE_LGS], 'x')
    van = [r for r in rows if r['attack'] == AWARE_VANILLA][0]
    assert van['cell'] == 'b' and van['robustness'] == 3.0
    lgs = [r for r in rows if r['attack'] == AWARE_LGS][0]
    assert lgs['cell'] == CELL_DIVERGED and lgs['robustness'] is None


def test_run_experiment_outputs(tmp_path):
    summary = runExperiment(tinyConfig(tmp_path / 'run'))
    out = tmp_path / 'run'
    assert summary['jobs'] == 2 and summary['failed'] == 0
    for name in ('records.csv', 'quality.csv', 'per_seed.csv',
                 'seed_mean.csv', 'headline.csv', 'scatter.csv'):
        rows = readCsv(str(out / name))
        assert rows
        assert all(r['config_hash'] for r in rows)

    head = readCsv(str(out / 'headline.csv'))
    # per defense: unattacked, two attack kinds, manual patch
    assert len(head) == 3 * 4
    assert {r['attack'] for r in head} == {ATTACK_NONE, AWARE_VANILLA,
                                          AWARE_LGS, ATTACK_MANUAL}
    assert len(readCsv(str(out / 'per_seed.csv'))) == 2 * 3
    assert os.path.exists(str(out / 'patches' / 'vanilla-ifgsm-0.1-clip_s0.ppm'))


def test_seed_mean_is_mean_of_seeds(tmp_path):
    runExperiment(tinyConfig(tmp_path, awareness=[AWARE_VANILLA],
                             seeds=[0, 1]))
    perSeed = readCsv(str(tmp_path / 'per_seed.csv'))
    for m in readCsv(str(tmp_path / 'seed_mean.csv')):
        vals = [float(r['robustness']) for r in perSeed
                if r['cell'] == m['cell'] and r['defense'] == m['defense']]
        assert len(vals) == 2 == int(m['seeds'])
        assert abs(float(m['robustness']) - sum(vals) / 2) < 2e-6


def test_experiment_is_deterministic(tmp_path):
    runExperiment(tinyConfig(tmp_path / 'a'))
    runExperiment(tinyConfig(tmp_path / 'b'))
    for name in ('records.csv', 'quality.csv', 'per_seed.csv',
                 'seed_mean.csv', 'headline.csv', 'scatter.csv'):
        assert (tmp_path / 'a' / name).read_bytes() == \
            (tmp_path / 'b' / name).read_bytes()


def test_diverged_cell_is_isolated(tmp_path, monkeypatch):
    real = fpharness.trainPatch

    def flaky(estimator, defense, dataset, cfg, progress=False):
        if cfg['awareness'] == AWARE_LGS:
            raise DivergenceError('loss is nan')
        return real(estimator, defense, dataset, cfg, progress)

    monkeypatch.setattr(fpharness, 'trainPatch', flaky)
    summary = runExperiment(tinyConfig(tmp_path))
    assert summary['diverged'] == 1 and summary['failed'] == 0

    means = readCsv(str(tmp_path / 'seed_mean.csv'))
    assert {m['status'] for m in means if m['awareness'] == AWARE_LGS} == \
        {CELL_DIVERGED}
    assert {m['status'] for m in means if m['awareness'] == AWARE_VANILLA} \
        == {'ok'}
    head = readCsv(str(tmp_path / 'headline.csv'))
    assert {r['cell'] for r in head if r['attack'] == AWARE_LGS} == \
        {CELL_DIVERGED}
