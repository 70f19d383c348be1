#!/usr/bin/env python
""" flowpatch - command line front end

Usage: flowpatch.py <command> [options], commands:
  synth         write a synthetic dataset with ground truth flow
  flow          Horn-Schunck flow of a frame pair
  defend        run LGS or ILP on the frames of a pair directory
  attack-train  train an adversarial patch
  evaluate      quality and robustness of one pipeline
  experiment    full defense x attack grid

Every command takes --config file.json; flags given on the command line
win over values from the file.
"""

import argparse
import json
import logging
import os
import sys

from fpcore import readPPM, writePPM, writeFlo, flowToColor, maskToImage
from fpflow import makeEstimator
from fpdefense import defenseConfig, defend
from fpattack import (attackConfig, trainPatch, manualPatch, savePatch,
                      loadPatch, writeLossLog)
from fpmetrics import evaluatePipeline, qualityRobustnessTable, writeRecords
from fpmetrics import writeTable
from fpharness import (FRAME_RE, synthDataset, ingestDataset, loadDataset,
                       experimentConfig, loadExperimentConfig, runExperiment)
from fpdefs import *  # noqa: F403

log = logging.getLogger('flowpatch')

# config file names that differ from the option they feed
CONFIG_KEYS = {
    'in': 'inp',
    'kind': 'defense',
    'blockSize': 'k',
    'overlap': 'o',
    'thresh': 't',
    'bLgs': 'b_lgs',
    'sIlp': 's_ilp',
    'tIlp': 't_ilp',
    'rTelea': 'r_telea',
    'iterations': 'iters',
    'learningRate': 'lr',
    'alphaPenalty': 'penalty',
    'patchSide': 'side',
}

FLAGS = {'inp': '--in'}


def giveHelp(parser=None):
    print(__doc__)
    if parser is not None:
        parser.print_help()


def addEstimatorArgs(p):
    p.add_argument('--alpha', type=float, default=HS_ALPHA,
                   help='Horn-Schunck smoothness weight')
    p.add_argument('--iters', type=int, default=HS_ITERS,
                   help='Horn-Schunck iterations')


def addDefenseArgs(p, default=DEF_NONE):
    p.add_argument('--defense', choices=DEFENSE_KINDS, default=default)
    p.add_argument('--k', '--block', dest='k', type=int, default=BLOCK_SIZE,
                   help='block size K')
    p.add_argument('--o', '--overlap', dest='o', type=int,
                   default=BLOCK_OVERLAP, help='block overlap O')
    p.add_argument('--t', '--thresh', dest='t', type=float,
                   default=BLOCK_THRESH, help='block threshold t')
    p.add_argument('--b-lgs', type=float, default=B_LGS,
                   help='LGS smoothing factor')
    p.add_argument('--s-ilp', type=float, default=S_ILP,
                   help='ILP re-evaluation scale')
    p.add_argument('--t-ilp', type=float, default=T_ILP,
                   help='ILP re-evaluation threshold')
    p.add_argument('--r-telea', type=int, default=R_TELEA,
                   help='Telea neighbourhood radius')


def defenseFromArgs(args):
    return defenseConfig(args.defense, blockSize=args.k, overlap=args.o,
                         thresh=args.t, bLgs=args.b_lgs, sIlp=args.s_ilp,
                         tIlp=args.t_ilp, rTelea=args.r_telea)


def estimatorFromArgs(args):
    return makeEstimator('hs', alpha=args.alpha, iterations=args.iters)


def buildParser():
    """ Returns (parser, subcommand parsers by name) """
    parser = argparse.ArgumentParser(
        prog='flowpatch',
        description='Adversarial patches against defended optical flow')
    parser.add_argument('-v', '--verbose', action='store_true',
                        help='debug logging')
    sub = parser.add_subparsers(dest='command')
    subs = {}

    def command(name, **kw):
        p = sub.add_parser(name, **kw)
        p.add_argument('--config', help='JSON file with option values')
        subs[name] = p
        return p

    p = command('synth', help='write a synthetic dataset')
    p.add_argument('--out')
    p.add_argument('--count', type=int, default=4)
    p.add_argument('--height', type=int, default=FRAME_HEIGHT)
    p.add_argument('--width', type=int, default=FRAME_WIDTH)
    p.add_argument('--seed', type=int, default=0)

    p = command('flow', help='flow of a frame pair')
    p.add_argument('--in', dest='inp', nargs='+', metavar='PATH',
                   help='pair directory, or frame1 frame2')
    p.add_argument('--out', help='.flo output')
    p.add_argument('--viz', '--color', dest='viz',
                   help='optional PPM visualization')
    addEstimatorArgs(p)

    p = command('defend', help='run a defense on the frames of a pair')
    p.add_argument('--in', dest='inp', metavar='PATH',
                   help='pair directory, or one PPM image')
    p.add_argument('--out', help='output directory')
    addDefenseArgs(p, DEF_LGS)

    p = command('attack-train', help='train a patch')
    p.add_argument('--data', help='dataset directory')
    p.add_argument('--out', help='patch .ppm output')
    p.add_argument('--log', help='loss CSV, default <out>_loss.csv')
    p.add_argument('--awareness', choices=AWARENESS_KINDS,
                   default=AWARE_VANILLA)
    p.add_argument('--optimizer', choices=(OPT_IFGSM, OPT_SGD),
                   default=OPT_IFGSM)
    p.add_argument('--lr', type=float, default=0.01)
    p.add_argument('--box', choices=(BOX_CLIP, BOX_COV), default=BOX_CLIP)
    p.add_argument('--steps', type=int, default=TRAIN_STEPS)
    p.add_argument('--side', type=int, default=PATCH_SIDE)
    p.add_argument('--penalty', type=float, default=ALPHA_PENALTY)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--full', action='store_true',
                   help='full-scale protocol: %d px patch, %d steps' %
                   (PATCH_SIDE_FULL, TRAIN_STEPS_FULL))
    addEstimatorArgs(p)

    p = command('evaluate', help='evaluate one pipeline')
    p.add_argument('--data')
    p.add_argument('--patch', help='patch .ppm, none for quality only')
    p.add_argument('--manual', type=int, metavar='SIDE',
                   help='use the checkerboard patch of this side')
    p.add_argument('--attack', default=None, help='attack label for records')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', help='records CSV')
    p.add_argument('--table', help='optional per-cell table CSV')
    addDefenseArgs(p)
    addEstimatorArgs(p)

    p = command('experiment', help='run the experiment grid')
    p.add_argument('--out', help='output directory')
    p.add_argument('--data', help='dataset directory instead of synthetic')
    p.add_argument('--workers', type=int)
    p.add_argument('--steps', type=int)
    return parser, subs


def flattenConfig(data):
    """ Nested config objects -> flat option defaults """
    flat = {}
    for key, val in data.items():
        if isinstance(val, dict):
            flat.update(flattenConfig(val))
        else:
            flat[CONFIG_KEYS.get(key, key)] = val
    return flat


def configDefaults(path):
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ConfigError('%s: top level must be an object' % path)
    return flattenConfig(data)


def need(args, *names):
    missing = [FLAGS.get(n, '--' + n.replace('_', '-')) for n in names
               if getattr(args, n, None) in (None, '', [])]
    if missing:
        raise ConfigError('%s: missing %s' % (args.command, ', '.join(missing)))


def pairFrames(paths):
    """ Frame paths of a pair directory, or the paths themselves """
    if isinstance(paths, str):
        paths = [paths]
    if len(paths) == 1 and os.path.isdir(paths[0]):
        names = sorted(n for n in os.listdir(paths[0]) if FRAME_RE.match(n))
        if not names:
            raise FormatError('No NNNN_1.ppm / NNNN_2.ppm frames in %s' %
                              paths[0])
        return [os.path.join(paths[0], n) for n in names]
    return list(paths)


def cmdSynth(args):
    need(args, 'out')
    synthDataset(args.out, args.count, args.height, args.width, args.seed)
    return 0


def cmdFlow(args):
    need(args, 'inp', 'out')
    frames = pairFrames(args.inp)
    if len(frames) < 2:
        raise ConfigError('flow needs two frames, got %d' % len(frames))
    if len(frames) > 2:
        log.warning("%d frames found, using %s and %s", len(frames),
                    frames[0], frames[1])
    flow = estimatorFromArgs(args)(readPPM(frames[0]), readPPM(frames[1]))
    writeFlo(flow, args.out)
    if args.viz:
        writePPM(flowToColor(flow), args.viz)
    return 0


def cmdDefend(args):
    need(args, 'inp', 'out')
    cfg = defenseFromArgs(args)
    os.makedirs(args.out, exist_ok=True)
    for path in pairFrames(args.inp):
        out, mask = defend(readPPM(path), cfg)
        base = os.path.join(args.out,
                            os.path.splitext(os.path.basename(path))[0])
        writePPM(out, base + '.ppm')
        writePPM(maskToImage(mask), base + '_mask.ppm')
        log.info("[DEF] %s: %d of %d pixels masked", path, int(mask.sum()),
                 mask.size)
    return 0


def loadData(root):
    index, report = ingestDataset(root)
    if not index:
        log.error("no usable frame pairs in %s", root)
        return None
    return loadDataset(index)


def cmdAttackTrain(args):
    need(args, 'data', 'out')
    data = loadData(args.data)
    if data is None:
        return 1
    if args.full:
        args.side, args.steps = PATCH_SIDE_FULL, TRAIN_STEPS_FULL
    cfg = attackConfig(args.awareness, args.optimizer, args.lr, args.box,
                       args.steps, args.penalty, args.seed, args.side)
    defense = defenseConfig(AWARE_DEFENSE[args.awareness])
    patch, history = trainPatch(estimatorFromArgs(args), defense, data, cfg,
                                progress=True)
    savePatch(patch, args.out, {'attack': cfg})
    lossLog = args.log
    if not lossLog:
        base = args.out[:-4] if args.out.endswith('.ppm') else args.out
        lossLog = base + '_loss.csv'
    writeLossLog(history, lossLog)
    return 0


def cmdEvaluate(args):
    need(args, 'data', 'out')
    data = loadData(args.data)
    if data is None:
        return 1
    patch = None
    attack = args.attack
    if args.patch:
        patch = loadPatch(args.patch)
    elif args.manual:
        patch = manualPatch(args.manual)
        attack = attack or ATTACK_MANUAL
    quality = all(e['flow'] is not None for e in data)
    records, agg = evaluatePipeline(estimatorFromArgs(args),
                                    defenseFromArgs(args), patch, data,
                                    seed=args.seed, attack=attack,
                                    quality=quality)
    writeRecords(records, args.out)
    if args.table:
        writeTable(qualityRobustnessTable(records)[0], args.table)
    log.info("[EVAL] %s/%s: quality %s robustness %s", agg['defense'],
             agg['attack'], agg['quality'], agg['robustness'])
    return 0


def cmdExperiment(args):
    over = {'outdir': args.out, 'workers': args.workers, 'steps': args.steps}
    if args.data:
        over['dataset'] = args.data
    if args.config:
        cfg = loadExperimentConfig(args.config, **over)
    else:
        cfg = experimentConfig(**over)
    summary = runExperiment(cfg)
    return 1 if summary['failed'] else 0


COMMANDS = {
    'synth': cmdSynth,
    'flow': cmdFlow,
    'defend': cmdDefend,
    'attack-train': cmdAttackTrain,
    'evaluate': cmdEvaluate,
    'experiment': cmdExperiment,
}


def main(argv=None):
    parser, subs = buildParser()
    args = parser.parse_args(argv)
    if not args.command:
        giveHelp(parser)
        return -1

    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        # the experiment grid reads its own config schema
        if args.config and args.command != 'experiment':
            subs[args.command].set_defaults(**configDefaults(args.config))
            args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (ValueError, ArithmeticError, IOError, EOFError) as e:
        log.error("%s: %s", args.command, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
