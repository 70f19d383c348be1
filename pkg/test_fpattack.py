""" Tests for patch placement, losses, optimizer steps and training """

import numpy as np
import pytest

import fpattack
from fpattack import (attackConfig, circleMask, fpPatch, patchFromValues,
                      randomPatch, manualPatch, samplePose, identityPose,
                      placementPlan, placePatch, fpPlace, fpACS, acsLoss,
                      fpPenalty, patchPenalty, attackLoss, optimizerStep,
                      trainPatch, savePatch, loadPatch, writeLossLog)
from fpcore import quantize
from fpdefense import defenseConfig
from fpdiff import gradCheck
from fpflow import makeEstimator, fpHSPrep
from fpharness import synthPair
from fpdefs import *  # noqa: F403


def smallDataset(count=2, H=32, W=48, seed=0):
    data = []
    for i in range(count):
        I1, I2, flow = synthPair(H, W, np.random.default_rng([seed, i]))
        data.append({'frame': '%04d' % i, 'frame1': I1, 'frame2': I2,
                     'flow': flow, 'valid': None})
    return data


def test_attack_config():
    cfg = attackConfig()
    assert cfg['alphaPenalty'] == 1e-8 and cfg['patchSide'] == 24
    with pytest.raises(ConfigError):
        attackConfig(steps=0)
    with pytest.raises(ConfigError):
        attackConfig(awareness='median')
    with pytest.raises(ConfigError):
        attackConfig(box='sigmoid')


def test_circle_mask_area():
    i = np.arange(100)
    brute = sum(1 for a in i for b in i if (a - 50) ** 2 + (b - 50) ** 2 < 2500)
    assert circleMask(100).sum() == brute
    plan = placementPlan((128, 128, 3), 100, identityPose((64, 64)))
    assert plan['mask'].sum() == brute


def test_identity_placement_is_exact():
    rng = np.random.default_rng(0)
    frame1 = rng.uniform(size=(40, 50, 3))
    frame2 = rng.uniform(size=(40, 50, 3))
    patch = randomPatch(12, BOX_CLIP, rng)
    J1, J2, mask = placePatch(frame1, frame2, patch, identityPose((20, 25)))
    valid = patch.valid()
    vals = patch.values()
    for i in range(12):
        for j in range(12):
            if valid[i, j]:
                assert np.array_equal(J1[14 + i, 19 + j], vals[i, j])
                assert np.array_equal(J2[14 + i, 19 + j], vals[i, j])
    assert mask.sum() == valid.sum()
    assert np.array_equal(J1[mask == 0], frame1[mask == 0])
    assert np.array_equal(J2[mask == 0], frame2[mask == 0])


@pytest.mark.parametrize('side', [5, 6, 7, 12, 13])
def test_identity_placement_odd_and_even_sides(side):
    rng = np.random.default_rng(side)
    frame = rng.uniform(size=(30, 30, 3))
    patch = randomPatch(side, BOX_CLIP, rng)
    J1, J2, mask = placePatch(frame, frame, patch, identityPose((15, 15)))
    valid = patch.valid()
    vals = patch.values()
    top = 15 - side // 2
    assert mask.sum() == valid.sum()
    for i, j in zip(*np.nonzero(valid)):
        assert mask[top + i, top + j] == 1
        assert np.array_equal(J1[top + i, top + j], vals[i, j])
        assert np.array_equal(J2[top + i, top + j], vals[i, j])


def test_circle_mask_is_centered_on_a_pixel():
    for side in (5, 7, 9):
        m = circleMask(side)
        assert np.array_equal(m, m[::-1]) and np.array_equal(m, m[:, ::-1])
        assert m[0, side // 2] == 1 and m[-1, side // 2] == 1


def test_rotated_placement_keeps_outside_pixels():
    rng = np.random.default_rng(1)
    frame = rng.uniform(size=(40, 40, 3))
    pose = {'center': (20, 20), 'rotation': 8.0, 'scale': 1.04}
    J1, _, mask = placePatch(frame, frame, randomPatch(16, BOX_CLIP, rng),
                             pose)
    assert np.array_equal(J1[mask == 0], frame[mask == 0])
    assert J1.min() >= 0.0 and J1.max() <= 1.0


def test_placement_out_of_bounds():
    frame = np.zeros((20, 20, 3))
    with pytest.raises(PlacementError):
        placePatch(frame, frame, manualPatch(12), identityPose((3, 10)))
    with pytest.raises(PlacementError):
        samplePose(np.random.default_rng(0), (20, 20, 3), 24)


def test_sampled_poses_are_placeable():
    rng = np.random.default_rng(2)
    for _ in range(50):
        pose = samplePose(rng, (40, 60, 3), 24)
        assert ROT_RANGE[0] <= pose['rotation'] <= ROT_RANGE[1]
        assert SCALE_RANGE[0] <= pose['scale'] <= SCALE_RANGE[1]
        placementPlan((40, 60, 3), 24, pose)


def test_placement_gradcheck():
    rng = np.random.default_rng(3)
    pair = rng.uniform(size=(2, 16, 16, 3))
    pose = {'center': (8, 8), 'rotation': 7.0, 'scale': 1.03}
    plan = placementPlan(pair.shape[1:], 8, pose)
    report = gradCheck(fpPlace(pair, plan), rng.uniform(size=(8, 8, 3)),
                       tol=1e-3)
    assert report['passed']


def test_acs_examples():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((6, 8, 2)) + 3.0
    assert np.isclose(acsLoss(f, f), 1.0)
    assert np.isclose(acsLoss(f, -f), -1.0)

    f = np.zeros((4, 4, 2))
    f[:, :, 0] = 1.0
    g = f.copy()
    g[:, 2:] = (0.0, 1.0)
    assert np.isclose(acsLoss(f, g), 0.5)


def test_acs_excludes_patch_and_zero_flow():
    f = np.ones((2, 2, 2))
    g = np.ones((2, 2, 2))
    g[0, 0] = (-1.0, -1.0)
    mask = np.zeros((2, 2), np.uint8)
    mask[0, 0] = 1
    assert np.isclose(acsLoss(f, g, mask), 1.0)
    g[1, 1] = 0.0
    assert np.isclose(acsLoss(f, g, mask), 2.0 / 3.0)
    with pytest.raises(ValueError):
        acsLoss(f, g, np.ones((2, 2)))


def test_acs_gradcheck():
    rng = np.random.default_rng(5)
    f = rng.standard_normal((8, 8, 2))
    mask = np.zeros((8, 8), np.uint8)
    mask[2:4, 3:6] = 1
    stage = fpACS(f, mask)
    assert gradCheck(stage, rng.standard_normal((8, 8, 2)))['passed']


def test_penalty_of_constant_and_ramp():
    const = fpPatch(np.full((16, 16, 3), 0.5))
    ramp = fpPatch(np.repeat(np.tile(np.arange(16) / 16.0, (16, 1))[:, :, None],
                             3, axis=2))
    assert patchPenalty(const, GRAD_FIRST) == 0.0
    assert patchPenalty(const, GRAD_SECOND) == 0.0
    assert patchPenalty(ramp, GRAD_SECOND) == 0.0
    assert patchPenalty(ramp, GRAD_FIRST) > 0.0

    board = manualPatch(16)
    for order in (GRAD_FIRST, GRAD_SECOND):
        assert patchPenalty(board, order) > patchPenalty(ramp, order)
        assert patchPenalty(board, order) > patchPenalty(const, order)


def test_penalty_counts_last_row_of_circle():
    side = 16
    assert circleMask(side)[-1].any()
    P = np.zeros((side, side, 3))
    P[side - 1, side // 2, 0] = 1.0
    # forward differences: the pixel itself, its left and upper neighbours
    assert patchPenalty(fpPatch(P), GRAD_FIRST) == 3.0
    # second differences: -2 at the pixel, 1 left, right and above
    assert patchPenalty(fpPatch(P), GRAD_SECOND) == 5.0


@pytest.mark.parametrize('order', [GRAD_FIRST, GRAD_SECOND])
def test_penalty_gradcheck(order):
    P = np.random.default_rng(6).uniform(size=(8, 8, 3))
    assert gradCheck(fpPenalty(order, 8), P)['passed']


def test_attack_loss():
    rng = np.random.default_rng(7)
    f = rng.standard_normal((6, 6, 2))
    fa = rng.standard_normal((6, 6, 2))
    patch = randomPatch(6, BOX_CLIP, rng)
    acs = acsLoss(f, fa)
    for aware in AWARENESS_KINDS:
        cfg = attackConfig(awareness=aware, alphaPenalty=0.0)
        assert attackLoss(f, fa, patch, cfg) == acs

    const = fpPatch(np.full((6, 6, 3), 0.5))
    van = attackLoss(f, fa, const, attackConfig())
    for aware in (AWARE_LGS, AWARE_ILP):
        assert attackLoss(f, fa, const, attackConfig(awareness=aware)) == van


def test_attack_loss_arithmetic(monkeypatch):
    monkeypatch.setattr(fpattack, 'acsLoss', lambda f, fa, m=None: -0.5)
    monkeypatch.setattr(fpattack, 'patchPenalty', lambda p, o: 1e6)
    cfg = attackConfig(awareness=AWARE_LGS, alphaPenalty=1e-8)
    loss = attackLoss(None, None, None, cfg)
    assert np.isclose(loss, -0.49)


def test_ifgsm_clip_step():
    patch = fpPatch(np.full((4, 4, 3), 0.05))
    cfg = attackConfig(optimizer=OPT_IFGSM, learningRate=0.1)
    out = optimizerStep(patch, np.ones((4, 4, 3)), cfg)
    assert np.all(out.values() == 0.0)


def test_sgd_zero_gradient():
    patch = randomPatch(5, BOX_COV, np.random.default_rng(8))
    cfg = attackConfig(optimizer=OPT_SGD, learningRate=100.0, box=BOX_COV)
    out = optimizerStep(patch, np.zeros((5, 5, 3)), cfg)
    assert np.array_equal(out.data, patch.data)


@pytest.mark.parametrize('box', [BOX_CLIP, BOX_COV])
def test_steps_stay_in_range(box):
    rng = np.random.default_rng(9)
    patch = randomPatch(6, box, rng)
    cfg = attackConfig(optimizer=OPT_SGD, learningRate=100.0, box=box)
    for _ in range(5):
        patch = optimizerStep(patch, rng.standard_normal((6, 6, 3)) * 50, cfg)
        vals = patch.values()
        assert vals.min() >= 0.0 and vals.max() <= 1.0


def test_cov_materialization():
    assert np.all(fpPatch(np.zeros((2, 2, 3)), BOX_COV).values() == 0.5)
    p = patchFromValues(np.array([[[0.0, 0.5, 1.0]] * 2] * 2), BOX_COV)
    assert np.allclose(p.values(), [[[0.0, 0.5, 1.0]] * 2] * 2)


def test_manual_patch():
    p = manualPatch(2, 1)
    assert p.values()[:, :, 0].tolist() == [[0.0, 1.0], [1.0, 0.0]]
    v = manualPatch(12, 3).values()[:, :, 0]
    assert np.all(np.abs(v[:, 3] - v[:, 2]) == 1.0)
    assert np.all(np.abs(v[6] - v[5]) == 1.0)
    with pytest.raises(ConfigError):
        manualPatch(1)
    with pytest.raises(ConfigError):
        manualPatch(8, 5)


def test_patch_save_load(tmp_path):
    rng = np.random.default_rng(10)
    for box in (BOX_CLIP, BOX_COV):
        patch = randomPatch(8, box, rng)
        path = str(tmp_path / ('patch_%s.ppm' % box))
        savePatch(patch, path, {'note': 'x'})
        back = loadPatch(path)
        assert back.box == box
        assert np.allclose(back.values(), quantize(patch.values()) / 255.0)


def test_training_with_zero_rate_keeps_patch():
    est = makeEstimator(iterations=5)
    cfg = attackConfig(steps=1, learningRate=0.0, patchSide=8, seed=3)
    patch, history = trainPatch(est, None, smallDataset(), cfg)
    start = randomPatch(8, BOX_CLIP, np.random.default_rng(3))
    assert np.array_equal(patch.data, start.data)
    assert len(history) == 1
    assert set(history[0]) == {'step', 'loss', 'acs', 'penalty'}


def test_training_is_deterministic(tmp_path):
    est = makeEstimator(iterations=5)
    cfg = attackConfig(steps=3, learningRate=0.1, patchSide=8, box=BOX_COV)
    data = smallDataset()
    p1, h1 = trainPatch(est, None, data, cfg)
    p2, h2 = trainPatch(est, None, data, cfg)
    assert np.array_equal(p1.data, p2.data)
    assert h1 == h2
    writeLossLog(h1, str(tmp_path / 'loss.csv'))
    assert len((tmp_path / 'loss.csv').read_text().splitlines()) == 4


@pytest.mark.parametrize('aware', [AWARE_LGS, AWARE_ILP])
def test_defense_aware_training_runs(aware):
    est = makeEstimator(iterations=5)
    cfg = attackConfig(awareness=aware, steps=2, learningRate=0.01,
                       patchSide=8)
    defense = defenseConfig(AWARE_DEFENSE[aware], blockSize=8, overlap=4)
    patch, history = trainPatch(est, defense, smallDataset(1), cfg)
    assert all(np.isfinite(h['loss']) for h in history)
    assert history[0]['penalty'] > 0.0
    vals = patch.values()
    assert vals.min() >= 0.0 and vals.max() <= 1.0


def test_training_needs_data():
    with pytest.raises(ValueError):
        trainPatch(makeEstimator(iterations=1), None, [], attackConfig())


def test_static_patch_only_touches_spatial_derivatives():
    rng = np.random.default_rng(11)
    I1, I2, _ = synthPair(32, 48, rng)
    pose = {'center': (16, 24), 'rotation': 6.0, 'scale': 1.02}
    J1, J2, mask = placePatch(I1, I2, randomPatch(12, BOX_CLIP, rng), pose)
    clean, _ = fpHSPrep().forward(np.stack([I1, I2]))
    attacked, _ = fpHSPrep().forward(np.stack([J1, J2]))
    It, ItClean = attacked[4], clean[4]
    assert np.all(It[mask == 1] == 0.0)
    assert np.array_equal(It[mask == 0], ItClean[mask == 0])
    # Ix, Iy change on the footprint and its one-pixel ring only
    ring = mask.copy()
    ring[1:] |= mask[:-1]
    ring[:-1] |= mask[1:]
    ring[:, 1:] |= mask[:, :-1]
    ring[:, :-1] |= mask[:, 1:]
    for k in (2, 3):
        assert np.array_equal(attacked[k][ring == 0], clean[k][ring == 0])
