#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Copyright (c) 2024 Pyvrd developers
#
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <http://www.gnu.org/licenses/>.

"""The ``pyvrd`` command line.

Every stage of the pipeline is a subcommand. All randomness flows from the
global ``--seed`` and every artifact gets a ``.config.json`` file beside it
echoing the options and configuration it was made with. Data errors exit
with status 1 and a one-line JSON object on stderr, usage errors with 2.
"""

import argparse
import logging
import os
import sys

import numpy as np

from pyvrd import config as pyvrd_config
from pyvrd import gbm, stages
from pyvrd.checkpoint import (ClassMap, HeadSpec, InitSpec, expand_attribute_head, partial_weight_transfer,
                              read_store, write_store)
from pyvrd.config import get_config, get_section
from pyvrd.core import PyvrdError
from pyvrd.ensemble import ModelOutput, NmsConfig, parse_model_argument, weighted_nms
from pyvrd.eval import VARIANTS, MatchConfig, RelationReport, roc_auc
from pyvrd.features import SemanticStats, fit_semantic_stats, label_candidates
from pyvrd.ingest import (read_class_list, read_detections, read_relation_predictions, read_relations,
                          read_score_table, read_vocabulary, write_detections, write_relation_predictions)
from pyvrd.sampler import ClassBalancedSampler, SamplerConfig
from pyvrd.synthetic import generate_corpus, synthetic_visual_scores
from pyvrd.utils import debug_on, logging_off, logging_on, to_json, write_json

LOG = logging.getLogger(__name__)

DEFAULT_SEED = 0
STATS_FILE = 'stats.h5'
STAGE2_DIR = 'stage2'
AGGREGATOR_DIR = 'aggregator'


class RunConfig(object):
    """What a command was run with, echoed next to its outputs."""

    def __init__(self, command, options, seed, config):
        """Initialize the class instance."""
        self.command = command
        self.options = options
        self.seed = seed
        self.config = config

    @classmethod
    def from_args(cls, args, sections=()):
        options = {key: 'inf' if val == float('inf') else val
                   for key, val in sorted(vars(args).items()) if key not in ('func', 'command')}
        config = {section: get_section(*section.split('.')) for section in sections}
        return cls(args.command, options, _seed(args), config)

    def to_dict(self):
        return {'command': self.command, 'options': self.options, 'seed': self.seed, 'config': self.config}

    def write(self, artifact):
        """Write the echo beside *artifact* (inside it when it is a directory)."""
        if os.path.isdir(artifact):
            path = os.path.join(artifact, 'config.json')
        else:
            path = artifact + '.config.json'
        write_json(path, self.to_dict())
        return path


def _seed(args):
    seed = getattr(args, 'seed', None)
    return DEFAULT_SEED if seed is None else seed


def _names(text):
    return [name.strip() for name in text.split(',') if name.strip()] if text else None


def _model_directory(path):
    """*path*, or the configured ``model_dir`` when none was given."""
    return path or get_config()['model_dir']


def _load_annotations(args):
    classes, triplet_vocab = read_vocabulary(args.vocabulary)
    return read_relations(args.annotations, classes, triplet_vocab, boxes_path=getattr(args, 'boxes', None))


def _typed(convert, accept, expected):
    """Argparse type that converts *text* and refuses values *accept* rejects."""
    def check(text):
        try:
            value = convert(text)
        except ValueError:
            raise argparse.ArgumentTypeError("expected %s, got %r" % (expected, text))
        if not accept(value):
            raise argparse.ArgumentTypeError("expected %s, got %r" % (expected, text))
        return value
    return check


_positive_int = _typed(int, lambda value: value > 0, 'a positive integer')
_non_negative_int = _typed(int, lambda value: value >= 0, 'a non-negative integer')
_positive_float = _typed(float, lambda value: 0.0 < value < float('inf'), 'a positive number')
_probability = _typed(float, lambda value: 0.0 <= value <= 1.0, 'a number in [0, 1]')
_iou_threshold = _typed(float, lambda value: 0.0 < value <= 1.0, 'a number in (0, 1]')


def _cap_value(text):
    return float('inf') if text.lower() in ('inf', 'none') else int(text)


_cap = _typed(_cap_value, lambda value: value >= 1, "a positive integer or 'inf'")


def cmd_sample(args):
    """Draw a class-balanced list of image ids."""
    annotations = _load_annotations(args)
    sampler = ClassBalancedSampler(annotations, SamplerConfig.from_config(cap=args.cap_n, seed=_seed(args)))
    image_ids = sampler.sample(args.count)
    with open(args.out, 'w', encoding='utf-8', newline='\n') as fd_:
        for image_id in image_ids:
            fd_.write(image_id + '\n')
    sidecar = dict(sampler.metadata(), count=args.count)
    write_json(args.out + '.json', sidecar)
    RunConfig.from_args(args, ['sampler']).write(args.out)
    return 0


def _read_pairs(path, task_vocab):
    """Object-attribute pairs, one ``object,attribute`` line each."""
    pairs, attributes = [], []
    with open(path, 'r', encoding='utf-8') as fd_:
        for line in fd_:
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            object_name, _sep, attribute = line.partition(',')
            if attribute.strip() not in attributes:
                attributes.append(attribute.strip())
            pairs.append((task_vocab.class_id(object_name.strip()), attributes.index(attribute.strip())))
    return pairs


def cmd_pwt(args):
    """Build a task head from a source checkpoint."""
    src = read_store(args.src)
    head = HeadSpec(args.head, args.bias, args.class_axis, args.rows_per_class)
    task_vocab = read_class_list(args.task_classes)
    class_map = None
    if args.map:
        source_vocab = read_class_list(args.source_classes or args.task_classes)
        class_map = ClassMap.from_json(args.map, task_vocab, source_vocab)
    if args.attribute_pairs:
        out = expand_attribute_head(src, head, _read_pairs(args.attribute_pairs, task_vocab), class_map)
    else:
        init = InitSpec.from_config(std=args.init_std, seed=_seed(args))
        fallback = read_store(args.fallback) if args.fallback else None
        out = partial_weight_transfer(src, head, class_map, len(task_vocab), init,
                                      fallback=fallback)
    write_store(out, args.out)
    RunConfig.from_args(args, ['checkpoint']).write(args.out)
    return 0


def cmd_nms(args):
    """Fuse the detection files of several models."""
    vocabulary = read_class_list(args.classes)
    outputs = []
    for text in args.model:
        path, weight = parse_model_argument(text)
        outputs.append(ModelOutput(path, weight, read_detections(path, vocabulary)))
    fused = weighted_nms(outputs, NmsConfig.from_config(iou_threshold=args.iou, score_floor=args.score_floor))
    write_detections(args.out, fused, vocabulary)
    RunConfig.from_args(args, ['ensemble']).write(args.out)
    return 0


def _split_plan(args, annotations, required=False):
    if args.split and os.path.exists(args.split):
        return stages.SplitPlan.load(args.split)
    if required:
        raise IOError("Split plan not found: %s" % args.split)
    plan = stages.make_split_plan(annotations, seed=_seed(args))
    plan.save(args.split or os.path.join(args.out, 'split.json'))
    return plan


def cmd_train(args):
    """Train the stage-two model bank."""
    args.out = _model_directory(args.out)
    annotations = _load_annotations(args)
    os.makedirs(args.out, exist_ok=True)
    split = _split_plan(args, annotations)
    stats = fit_semantic_stats(annotations.subset(split.stage2))
    stats.save(os.path.join(args.out, STATS_FILE))
    image_ids = None
    if args.sample_count:
        sampler = ClassBalancedSampler(annotations.subset(split.stage2),
                                       SamplerConfig.from_config(cap=args.cap_n, seed=_seed(args)))
        image_ids = sampler.sample(args.sample_count)
    predicates = None
    if args.predicates:
        predicates = [annotations.triplet_vocab.predicate_id(name) for name in _names(args.predicates)]
    config = gbm.GbmConfig.from_config('spatio_semantic', seed=_seed(args), rounds=args.rounds)
    bank = stages.train_stage2(annotations, stats, split, config, predicates=predicates, image_ids=image_ids)
    bank.save(os.path.join(args.out, STAGE2_DIR))
    RunConfig.from_args(args, ['gbm.spatio_semantic', 'stages', 'sampler']).write(args.out)
    return 0


def cmd_score(args):
    """Score the candidate pairs of a detection file with a trained bank."""
    args.model = _model_directory(args.model)
    classes, triplet_vocab = read_vocabulary(args.vocabulary)
    stats = SemanticStats.load(os.path.join(args.model, STATS_FILE))
    bank = stages.RelationshipModelBank.load(os.path.join(args.model, STAGE2_DIR))
    detections = read_detections(args.detections, classes)
    instances = stages.score_pairs(bank, detections, stats, triplet_vocab, score_floor=args.score_floor,
                                   top_m=args.top_m)
    write_relation_predictions(args.out, instances, triplet_vocab)
    if args.export_features:
        ground_truth = None
        if args.gt:
            ground_truth = list(read_relations(args.gt, classes, triplet_vocab).all_relations())
        stages.export_pair_features(bank, detections, stats, triplet_vocab, args.export_features,
                                    ground_truth=ground_truth)
    RunConfig.from_args(args, ['stages']).write(args.out)
    return 0


def cmd_aggregate(args):
    """Train the third stage, then optionally rescore a prediction file with it."""
    args.model = _model_directory(args.model)
    annotations = _load_annotations(args)
    stats = SemanticStats.load(os.path.join(args.model, STATS_FILE))
    bank = stages.RelationshipModelBank.load(os.path.join(args.model, STAGE2_DIR))
    split = _split_plan(args, annotations, required=True)
    table = read_score_table(args.visual_scores)
    config = gbm.GbmConfig.from_config('aggregator', seed=_seed(args), rounds=args.rounds)
    aggregator = stages.fit_aggregator(bank, annotations, split, stats, table, config, policy=args.policy)
    aggregator.save(os.path.join(args.model, AGGREGATOR_DIR))
    echo = RunConfig.from_args(args, ['gbm.aggregator', 'stages'])
    echo.write(os.path.join(args.model, AGGREGATOR_DIR))
    if args.predictions:
        instances = read_relation_predictions(args.predictions, annotations.triplet_vocab)
        joined, missing = stages.join_visual_scores(instances, table, policy=args.policy)
        write_relation_predictions(args.out, stages.aggregate(aggregator, joined, stats),
                                   annotations.triplet_vocab)
        if missing:
            write_json(args.out + '.missing.json', missing)
        echo.write(args.out)
    return 0


def _predicate_names(triplet_vocab, predicate_ids):
    return {pid: triplet_vocab.predicate_name(pid) for pid in sorted(predicate_ids)}


def cmd_eval(args):
    """Print the AP of every predicate and the mAP of a prediction file."""
    annotations = read_relations(args.gt, *read_vocabulary(args.vocabulary))
    triplet_vocab = annotations.triplet_vocab
    predictions = read_relation_predictions(args.pred, triplet_vocab)
    ground_truth = list(annotations.all_relations())
    if args.predicates:
        predicate_ids = [triplet_vocab.predicate_id(name) for name in _names(args.predicates)]
    else:
        predicate_ids = {rel.predicate_id for rel in predictions} | {rel.predicate_id for rel in ground_truth}
    report = RelationReport(_predicate_names(triplet_vocab, predicate_ids),
                            MatchConfig.from_config(iou_threshold=args.iou))
    report.evaluate(args.label, predictions, ground_truth)
    print(report.render())
    if args.json_out:
        with open(args.json_out, 'w', encoding='utf-8', newline='\n') as fd_:
            fd_.write(report.to_json() + '\n')
        RunConfig.from_args(args, ['eval']).write(args.json_out)
    return 0


def _demo_gbm_config(name, seed, rounds):
    config = gbm.GbmConfig.from_dict(get_config()['demo']['gbm'][name]).replace(seed=seed)
    if rounds is not None:
        config = config.replace(rounds=rounds)
    return config


def run_demo(num_images=None, seed=DEFAULT_SEED, rounds=None):
    """Run the whole pipeline on a synthetic corpus and return the validation report."""
    section = get_config()['demo']
    num_images = section['images'] if num_images is None else num_images
    corpus_seed, split_seed, gbm_seed, visual_seed = (int(value) for value in
                                                      np.random.SeedSequence(seed).generate_state(4))
    corpus = generate_corpus(num_images, seed=corpus_seed)
    triplet_vocab = corpus.triplet_vocab
    split = stages.make_split_plan(corpus, section['split'], seed=split_seed)
    train = corpus.subset(split.stage2)
    stats = fit_semantic_stats(train)

    image_ids = None
    sampler = ClassBalancedSampler(train, SamplerConfig.from_config(seed=split_seed))
    if section['sample_count']:
        image_ids = sampler.sample(section['sample_count'])
    LOG.info("Class sampling distribution: %s", sampler.metadata()['probabilities'])

    bank = stages.train_stage2(corpus, stats, split, _demo_gbm_config('spatio_semantic', gbm_seed, rounds),
                               image_ids=image_ids)
    table = synthetic_visual_scores(corpus, seed=visual_seed)
    aggregator = stages.fit_aggregator(bank, corpus, split, stats, table,
                                       _demo_gbm_config('aggregator', gbm_seed, rounds))

    validation = corpus.subset(split.validation)
    detections = [det for dets in validation.boxes.values() for det in dets]
    instances = stages.score_pairs(bank, detections, stats, triplet_vocab)
    joined, _missing = stages.join_visual_scores(instances, table)
    attribute_id = triplet_vocab.attribute_predicate_id
    ground_truth = [rel for rel in validation.all_relations() if rel.predicate_id != attribute_id]

    report = RelationReport(_predicate_names(triplet_vocab, triplet_vocab.relation_predicates()))
    variants = dict(zip(VARIANTS, ([item.instance for item in joined], stages.visual_instances(joined),
                                   stages.average_instances(joined), stages.aggregate(aggregator, joined, stats))))
    for name in VARIANTS:
        report.evaluate(name, variants[name], ground_truth)

    if LOG.isEnabledFor(logging.INFO):
        for predicate_id in triplet_vocab.relation_predicates():
            rows = [idx for idx, item in enumerate(joined) if item.instance.predicate_id == predicate_id]
            pairs = [(joined[idx].instance.subject, joined[idx].instance.object) for idx in rows]
            labels = [label for _pair, label in label_candidates(pairs, ground_truth, predicate_id)]
            if 0 < sum(labels) < len(labels):
                LOG.info("%s: stage-2 ROC AUC %.4f", triplet_vocab.predicate_name(predicate_id),
                         roc_auc(labels, [joined[idx].instance.score for idx in rows]))
    return report


def cmd_demo(args):
    """Run the synthetic end-to-end demo and print its report."""
    report = run_demo(args.images, seed=_seed(args), rounds=args.rounds)
    sys.stdout.write(report.render() + '\n')
    if args.json_out:
        with open(args.json_out, 'w', encoding='utf-8', newline='\n') as fd_:
            fd_.write(report.to_json() + '\n')
        RunConfig.from_args(args, ['demo']).write(args.json_out)
    return 0


def _common_arguments():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=argparse.SUPPRESS,
                        help="Seed of every random draw (default: %d)" % DEFAULT_SEED)
    common.add_argument('-v', '--verbose', action='count', default=argparse.SUPPRESS,
                        help="Turn logging on, twice for debug output")
    common.add_argument('--config', default=argparse.SUPPRESS,
                        help="YAML file merged over the built-in configuration")
    return common


def get_parser():
    """Build the argument parser."""
    common = _common_arguments()
    parser = argparse.ArgumentParser(prog='pyvrd', parents=[common],
                                     description='Visual relationship detection pipeline')
    subparsers = parser.add_subparsers(dest='command', metavar='command')
    subparsers.required = True

    def _add(name, func, help_text):
        sub = subparsers.add_parser(name, parents=[common], help=help_text, description=help_text)
        sub.set_defaults(func=func)
        return sub

    def _annotation_arguments(sub):
        sub.add_argument('--vocabulary', required=True, help="Vocabulary YAML file")
        sub.add_argument('--annotations', required=True, help="Ground-truth relation CSV")
        sub.add_argument('--boxes', default=None, help="Optional ground-truth box CSV")

    sub = _add('sample', cmd_sample, "Draw class-balanced image ids")
    _annotation_arguments(sub)
    sub.add_argument('--cap-n', type=_cap, default=None, help="Class cap, or 'inf' for the original distribution")
    sub.add_argument('--count', type=_positive_int, required=True, help="Number of ids to draw")
    sub.add_argument('--out', required=True, help="Output id list")

    sub = _add('pwt', cmd_pwt, "Transfer or expand a classification head")
    sub.add_argument('--src', required=True, help="Source PWT1 tensor store")
    sub.add_argument('--head', required=True, help="Name of the head weight tensor")
    sub.add_argument('--bias', default=None, help="Name of the head bias tensor")
    sub.add_argument('--class-axis', type=_non_negative_int, default=0)
    sub.add_argument('--rows-per-class', type=_positive_int, default=1)
    sub.add_argument('--task-classes', required=True, help="Task class list")
    sub.add_argument('--source-classes', default=None, help="Source class list the map refers to")
    sub.add_argument('--map', default=None, help="JSON map from task class names to source class names")
    sub.add_argument('--init-std', type=_positive_float, default=None,
                     help="Std of the rows drawn for unmapped classes")
    sub.add_argument('--fallback', default=None, help="Store whose head provides the unmapped rows")
    sub.add_argument('--attribute-pairs', default=None,
                     help="File of 'object,attribute' lines: expand the head to one row per pair")
    sub.add_argument('--out', required=True, help="Output PWT1 tensor store")

    sub = _add('nms', cmd_nms, "Fuse the detections of several models")
    sub.add_argument('--model', action='append', required=True, help="Detection CSV, optionally path:weight")
    sub.add_argument('--classes', required=True, help="Class list")
    sub.add_argument('--iou', type=_iou_threshold, default=None, help="IoU threshold of a cluster")
    sub.add_argument('--score-floor', type=_probability, default=None)
    sub.add_argument('--out', required=True, help="Output detection CSV")

    sub = _add('train', cmd_train, "Train the stage-two models")
    _annotation_arguments(sub)
    sub.add_argument('--split', default=None, help="Split plan JSON, created when missing")
    sub.add_argument('--predicates', default=None, help="Comma separated predicate names")
    sub.add_argument('--sample-count', type=_non_negative_int, default=0,
                     help="Train on a class-balanced draw of this size")
    sub.add_argument('--cap-n', type=_cap, default=None, help="Class cap of the draw")
    sub.add_argument('--rounds', type=_positive_int, default=None, help="Boosting rounds")
    sub.add_argument('--out', default=None, help="Model directory (default: the configured model_dir)")

    sub = _add('score', cmd_score, "Score candidate pairs with the stage-two models")
    sub.add_argument('--model', default=None, help="Model directory (default: the configured model_dir)")
    sub.add_argument('--vocabulary', required=True, help="Vocabulary YAML file")
    sub.add_argument('--detections', required=True, help="Detection CSV")
    sub.add_argument('--top-m', type=_positive_int, default=None)
    sub.add_argument('--score-floor', type=_probability, default=None)
    sub.add_argument('--out', required=True, help="Output prediction CSV")
    sub.add_argument('--export-features', default=None, metavar='DIR',
                     help="Also write the feature matrix and crop rectangles of every candidate pair here")
    sub.add_argument('--gt', default=None, help="Ground-truth relation CSV labelling the exported pairs")

    sub = _add('aggregate', cmd_aggregate, "Train the third stage and rescore predictions")
    _annotation_arguments(sub)
    sub.add_argument('--model', default=None, help="Model directory (default: the configured model_dir)")
    sub.add_argument('--split', required=True, help="Split plan JSON")
    sub.add_argument('--visual-scores', required=True, help="Visual score table CSV")
    sub.add_argument('--policy', choices=stages.POLICIES, default=None)
    sub.add_argument('--rounds', type=_positive_int, default=None, help="Boosting rounds")
    sub.add_argument('--predictions', default=None, help="Prediction CSV to rescore")
    sub.add_argument('--out', default=None, help="Rescored prediction CSV")

    sub = _add('eval', cmd_eval, "Compute per-predicate AP and mAP")
    sub.add_argument('--pred', required=True, help="Prediction CSV")
    sub.add_argument('--gt', required=True, help="Ground-truth relation CSV")
    sub.add_argument('--vocabulary', required=True, help="Vocabulary YAML file")
    sub.add_argument('--iou', type=_iou_threshold, default=None)
    sub.add_argument('--predicates', default=None, help="Comma separated predicate names")
    sub.add_argument('--label', default='predictions', help="Column title of the report")
    sub.add_argument('--json-out', default=None, help="JSON report")

    sub = _add('demo', cmd_demo, "Run the pipeline end to end on a synthetic corpus")
    sub.add_argument('--images', type=_positive_int, default=None, help="Number of synthetic images")
    sub.add_argument('--rounds', type=_positive_int, default=None, help="Boosting rounds of both stages")
    sub.add_argument('--json-out', default=None, help="JSON report")
    return parser


def _check_arguments(parser, args):
    if args.command == 'aggregate' and args.predictions and not args.out:
        parser.error("--predictions needs --out")
    if args.command == 'score' and args.gt and not args.export_features:
        parser.error("--gt only labels the pairs of --export-features")
    if args.command == 'pwt' and not args.map and not args.attribute_pairs:
        parser.error("pwt needs --map, --attribute-pairs or both")
    config_file = getattr(args, 'config', None)
    if config_file is not None and not os.path.isfile(config_file):
        parser.error("Config file does not exist: %s" % config_file)


def main(argv=None):
    """Run the command line; return the exit status."""
    parser = get_parser()
    args = parser.parse_args(argv)
    _check_arguments(parser, args)
    verbose = getattr(args, 'verbose', 0)
    if verbose >= 2:
        debug_on()
    elif verbose == 1:
        logging_on(logging.INFO)
    else:
        logging_off()
    previous = pyvrd_config.CONFIG_FILE
    if getattr(args, 'config', None) is not None:
        pyvrd_config.CONFIG_FILE = args.config
    try:
        return args.func(args)
    except (PyvrdError, IOError, ValueError, KeyError) as err:
        message = {'error': type(err).__name__, 'module': type(err).__module__, 'message': str(err)}
        sys.stderr.write(to_json(message, indent=None) + '\n')
        return 1
    finally:
        pyvrd_config.CONFIG_FILE = previous


if __name__ == '__main__':
    sys.exit(main())
