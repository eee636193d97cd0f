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

"""The relationship pipeline after detection.

Stage two scores candidate pairs with one spatio-semantic boosted model per
predicate. Scores of an external visual model are joined to them, and stage
three learns, again per predicate, how to combine both scores with the pair
features. The stage-two and stage-three models are trained on disjoint
image splits.
"""

import json
import logging
import os
from typing import NamedTuple

import numpy as np

from pyvrd import gbm
from pyvrd.config import get_config
from pyvrd.core import PyvrdError, RelationInstance
from pyvrd.features import (extract_feature_matrix, generate_candidates, label_candidates, layout_fingerprint,
                            write_crop_specs, write_feature_matrix)
from pyvrd.ingest import ScoreTable
from pyvrd.utils import _tqdm_or_iter, map_tasks

LOG = logging.getLogger(__name__)

MANIFEST = 'manifest.json'
AGGREGATOR_MAX_DEPTH = 8
POLICIES = ('neutral', 'strict', 'raise')


class FingerprintMismatch(PyvrdError, ValueError):
    """Models were trained on another feature layout than the one in use."""


class SplitLeakage(PyvrdError, ValueError):
    """An image appears in more than one split."""


class MissingVisualScore(PyvrdError, KeyError):
    """A relation instance has no entry in the visual score table."""

    def __str__(self):
        return str(self.args[0]) if self.args else ''


class SplitPlan(object):
    """Image-disjoint split into stage-two, stage-three and validation images."""

    def __init__(self, stage2, stage3, validation):
        """Initialize the class instance."""
        self.stage2 = sorted(set(stage2))
        self.stage3 = sorted(set(stage3))
        self.validation = sorted(set(validation))
        for name_a, ids_a, name_b, ids_b in (('stage2', self.stage2, 'stage3', self.stage3),
                                             ('stage2', self.stage2, 'validation', self.validation),
                                             ('stage3', self.stage3, 'validation', self.validation)):
            shared = set(ids_a) & set(ids_b)
            if shared:
                raise SplitLeakage("%d image(s) in both %s and %s, e.g. %s"
                                   % (len(shared), name_a, name_b, sorted(shared)[0]))

    def __repr__(self):
        return "SplitPlan(stage2=%d, stage3=%d, validation=%d images)" % (
            len(self.stage2), len(self.stage3), len(self.validation))

    def to_dict(self):
        return {'stage2': self.stage2, 'stage3': self.stage3, 'validation': self.validation}

    def save(self, path):
        with open(path, 'w', encoding='utf-8', newline='\n') as fd_:
            json.dump(self.to_dict(), fd_, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as fd_:
            content = json.load(fd_)
        return cls(content['stage2'], content['stage3'], content['validation'])


def make_split_plan(annotations, proportions=None, seed=0):
    """Shuffle the images and cut them in three parts of the given proportions.

    Every part gets at least one image when there are three images or more.
    """
    if proportions is None:
        proportions = get_config()['stages']['split']
    proportions = np.asarray(proportions, dtype=np.float64)
    if proportions.shape != (3,) or np.any(proportions < 0) or proportions.sum() <= 0:
        raise ValueError("Need three non-negative split proportions, got %r" % (list(proportions),))
    proportions = proportions / proportions.sum()
    image_ids = annotations.image_ids()
    rng = np.random.Generator(np.random.PCG64(seed))
    order = [image_ids[idx] for idx in rng.permutation(len(image_ids))]
    total = len(order)
    sizes = [int(round(share * total)) for share in proportions[:2]]
    if total >= 3:
        sizes = [max(1, size) for size in sizes]
        sizes[0] = min(sizes[0], total - sizes[1] - 1)
    stage2 = order[:sizes[0]]
    stage3 = order[sizes[0]:sizes[0] + sizes[1]]
    plan = SplitPlan(stage2, stage3, order[sizes[0] + sizes[1]:])
    LOG.info("Split %d images into %r", total, plan)
    return plan


def check_disjoint(split, image_ids_a, image_ids_b):
    """Raise SplitLeakage when two image lists share an id."""
    shared = set(image_ids_a) & set(image_ids_b)
    if shared:
        raise SplitLeakage("%d image(s) used by two stages of %r" % (len(shared), split))


class PairDataset(NamedTuple):
    """Candidate pairs of one predicate with their features and 0/1 labels."""

    pairs: list
    features: np.ndarray
    labels: np.ndarray


def build_pair_dataset(annotations, image_ids, stats, triplet_vocab, predicate_id, match_iou=None):
    """Candidates of *predicate_id* over ground-truth boxes, labelled against ground-truth relations.

    *image_ids* may repeat (a class-balanced sample); a repeated image
    contributes its pairs once per occurrence.
    """
    per_image = {}
    for image_id in sorted(set(image_ids)):
        candidates = generate_candidates(annotations.boxes.get(image_id, ()), predicate_id, triplet_vocab)
        per_image[image_id] = label_candidates(candidates, annotations.relations.get(image_id, ()),
                                               predicate_id, match_iou)
    labelled = [item for image_id in image_ids for item in per_image[image_id]]
    pairs = [pair for pair, _ in labelled]
    labels = np.array([label for _, label in labelled], dtype=np.float64)
    return PairDataset(pairs, extract_feature_matrix(pairs, stats), labels)


class _ModelDirectory(object):
    """Per-predicate models persisted as one model file each plus a JSON manifest."""

    kind = None

    def __init__(self, models, fingerprint, predicate_names=None, config=None):
        """Initialize the class instance."""
        self.models = dict(sorted(models.items()))
        self.fingerprint = fingerprint
        self.predicate_names = dict(predicate_names or {})
        self.config = config
        for predicate_id, model in self.models.items():
            if model.fingerprint != fingerprint:
                raise FingerprintMismatch("Model of predicate %d has layout %s, expected %s"
                                          % (predicate_id, model.fingerprint, fingerprint))

    def __contains__(self, predicate_id):
        return predicate_id in self.models

    def __len__(self):
        return len(self.models)

    def __repr__(self):
        return "%s(%d predicates, layout %s)" % (self.__class__.__name__, len(self), self.fingerprint)

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        files = {}
        for predicate_id, model in self.models.items():
            filename = 'predicate_%03d.gbm' % predicate_id
            gbm.save_model(model, os.path.join(directory, filename))
            files[str(predicate_id)] = filename
        manifest = {'kind': self.kind, 'fingerprint': self.fingerprint, 'files': files,
                    'predicates': {str(pid): name for pid, name in sorted(self.predicate_names.items())},
                    'config': self.config}
        with open(os.path.join(directory, MANIFEST), 'w', encoding='utf-8', newline='\n') as fd_:
            json.dump(manifest, fd_, indent=1, sort_keys=True)
        LOG.debug("Saved %r to %s", self, directory)

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, MANIFEST), 'r', encoding='utf-8') as fd_:
            manifest = json.load(fd_)
        if manifest.get('kind') != cls.kind:
            raise ValueError("%s holds a %r model directory, not %r" % (directory, manifest.get('kind'), cls.kind))
        models = {int(pid): gbm.load_model(os.path.join(directory, filename))
                  for pid, filename in manifest['files'].items()}
        names = {int(pid): name for pid, name in manifest.get('predicates', {}).items()}
        return cls(models, manifest['fingerprint'], names, manifest.get('config'))


class RelationshipModelBank(_ModelDirectory):
    """Stage-two spatio-semantic models, one per predicate."""

    kind = 'stage2'


class AggregatorModel(_ModelDirectory):
    """Stage-three models combining stage-two score, visual score and pair features."""

    kind = 'aggregator'


def aggregator_feature_names(stats):
    return ['stage2_score', 'visual_score'] + stats.feature_names


def _predicate_names(triplet_vocab, predicate_ids):
    return {pid: triplet_vocab.predicate_name(pid) for pid in predicate_ids}


def train_stage2(annotations, stats, split, config=None, predicates=None, image_ids=None, parallel=None):
    """Train one spatio-semantic model per predicate on the stage-two images.

    *image_ids* replaces the stage-two image list, e.g. with a class-balanced
    sample of it. Validation images drive early stopping. Predicates without
    positive examples, and the attribute predicate, are skipped.
    """
    config = config or gbm.GbmConfig.from_config('spatio_semantic')
    if parallel is None:
        parallel = get_config()['parallel']
    triplet_vocab = annotations.triplet_vocab
    if image_ids is None:
        image_ids = split.stage2
    check_disjoint(split, image_ids, split.stage3)
    check_disjoint(split, image_ids, split.validation)
    if predicates is None:
        predicates = triplet_vocab.relation_predicates()
    attribute_id = triplet_vocab.attribute_predicate_id
    names = stats.feature_names

    def _train_one(predicate_id):
        name = triplet_vocab.predicate_name(predicate_id)
        if predicate_id == attribute_id:
            LOG.warning("Skipping attribute predicate %r: it is predicted by the detector head", name)
            return None
        data = build_pair_dataset(annotations, image_ids, stats, triplet_vocab, predicate_id)
        if not data.labels.any():
            LOG.warning("Skipping predicate %r: no positive example among %d candidate pairs",
                        name, len(data.labels))
            return None
        valid = build_pair_dataset(annotations, split.validation, stats, triplet_vocab, predicate_id)
        validation = (valid.features, valid.labels) if len(valid.labels) else None
        LOG.info("Training stage-2 model for %r on %d pairs (%d positive)", name, len(data.labels),
                 int(data.labels.sum()))
        return gbm.train(data.features, data.labels, config, validation=validation, feature_names=names)

    predicates = list(predicates)
    results = map_tasks(_train_one, predicates, parallel=parallel)
    models = {pid: model for pid, model in zip(predicates, results) if model is not None}
    return RelationshipModelBank(models, stats.fingerprint, _predicate_names(triplet_vocab, models),
                                 config.to_dict())


def _group_by_image(detections):
    per_image = {}
    for det in detections:
        per_image.setdefault(det.image_id, []).append(det)
    return per_image


def _instance_order(instance):
    return (instance.image_id, -instance.score, instance.predicate_id,
            tuple(instance.subject.box), tuple(instance.object.box),
            instance.subject.class_id, instance.object.class_id)


def score_pairs(bank, detections, stats, triplet_vocab, score_floor=None, top_m=None):
    """Score every candidate pair of every image with the model of its predicate.

    Instances scoring below *score_floor* are dropped and only the *top_m*
    best instances of each image are kept.
    """
    section = get_config()['stages']
    score_floor = section['score_floor'] if score_floor is None else score_floor
    top_m = section['top_m'] if top_m is None else top_m
    if bank.fingerprint != stats.fingerprint:
        raise FingerprintMismatch("Model bank layout %s does not match feature layout %s"
                                  % (bank.fingerprint, stats.fingerprint))

    per_image = _group_by_image(detections)
    scored = []
    quiet = not LOG.isEnabledFor(logging.INFO)
    for predicate_id, model in _tqdm_or_iter(list(bank.models.items()), desc='scoring', disable=quiet):
        pairs = []
        for image_id in sorted(per_image):
            pairs.extend(generate_candidates(per_image[image_id], predicate_id, triplet_vocab))
        if not pairs:
            continue
        probabilities = gbm.predict_proba(model, extract_feature_matrix(pairs, stats))
        for (subject, obj), prob in zip(pairs, probabilities):
            if prob >= score_floor:
                scored.append(RelationInstance(subject.image_id, subject, obj, predicate_id, float(prob)))
    scored.sort(key=_instance_order)
    kept = []
    counts = {}
    for instance in scored:
        counts[instance.image_id] = counts.get(instance.image_id, 0) + 1
        if counts[instance.image_id] <= top_m:
            kept.append(instance)
    LOG.debug("Scored %d instances, kept %d", len(scored), len(kept))
    return kept


def export_pair_features(bank, detections, stats, triplet_vocab, directory, ground_truth=None):
    """Write the candidate pairs of every banked predicate for offline inspection.

    Each predicate gets a feature CSV and a JSON-lines file of crop rectangles
    for the visual stage. With *ground_truth* relations the feature CSV carries
    a label column, matched against the predicted boxes by ``features.match_iou``.
    Return the written paths.
    """
    os.makedirs(directory, exist_ok=True)
    per_image = _group_by_image(detections)
    written = []
    for predicate_id in bank.models:
        pairs = []
        for image_id in sorted(per_image):
            pairs.extend(generate_candidates(per_image[image_id], predicate_id, triplet_vocab))
        labels = None
        if ground_truth is not None:
            labels = [label for _pair, label in label_candidates(pairs, ground_truth, predicate_id,
                                                                 predicted_boxes=True)]
        stem = os.path.join(directory, 'predicate_%03d' % predicate_id)
        write_feature_matrix(stem + '.features.csv', extract_feature_matrix(pairs, stats),
                             stats.feature_names, labels)
        write_crop_specs(stem + '.crops.jsonl', pairs)
        written.extend([stem + '.features.csv', stem + '.crops.jsonl'])
        LOG.debug("Exported %d pairs of predicate %d", len(pairs), predicate_id)
    return written


class JoinedInstance(NamedTuple):
    """A stage-two relation instance with the visual score of its pair."""

    instance: object
    visual_score: float


def join_visual_scores(instances, table, policy=None, neutral=None):
    """Attach visual scores to relation instances.

    With the ``neutral`` policy a missing score becomes *neutral*; with
    ``strict`` the instance is dropped and an error record describes it;
    with ``raise`` MissingVisualScore is raised. Returns the joined instances
    and the error records.
    """
    section = get_config()['stages']
    policy = section['visual_policy'] if policy is None else policy
    neutral = section['neutral_score'] if neutral is None else neutral
    if policy not in POLICIES:
        raise ValueError("Unknown visual score policy %r, use one of %s" % (policy, ", ".join(POLICIES)))
    joined, missing = [], []
    for instance in instances:
        score = table.lookup(instance)
        if score is None:
            if policy == 'raise':
                raise MissingVisualScore("No visual score for %s" % (ScoreTable.key_for(instance),))
            if policy == 'strict':
                image_id, subject_key, object_key, predicate_id = ScoreTable.key_for(instance)
                missing.append({'error': MissingVisualScore.__name__, 'image_id': image_id,
                                'subject_key': subject_key, 'object_key': object_key,
                                'predicate': predicate_id})
                continue
            score = neutral
        joined.append(JoinedInstance(instance, float(score)))
    if missing:
        LOG.warning("Dropped %d instances without visual score", len(missing))
    return joined, missing


def average_baseline(stage2_score, visual_score):
    """Mean of the stage-two and the visual score.

    >>> average_baseline(0.66, 0.34)
    0.5
    """
    return (stage2_score + visual_score) / 2.0


def average_instances(joined):
    """Relation instances scored by :func:`average_baseline`."""
    return [item.instance._replace(score=average_baseline(item.instance.score, item.visual_score))
            for item in joined]


def visual_instances(joined):
    """Relation instances scored by the visual score alone."""
    return [item.instance._replace(score=item.visual_score) for item in joined]


def aggregator_matrix(stage2_scores, visual_scores, features):
    return np.column_stack([np.asarray(stage2_scores, dtype=np.float64),
                            np.asarray(visual_scores, dtype=np.float64),
                            np.asarray(features, dtype=np.float64)])


def train_aggregator(stage2_scores, visual_scores, features, labels, predicate_ids, config=None,
                     feature_names=None, validation=None):
    """Train one stage-three gbtree model per predicate.

    All arguments are row-aligned arrays over stage-three candidate pairs;
    *predicate_ids* tells which predicate every row belongs to.
    *validation* optionally holds the same five arrays for early stopping.
    """
    config = config or gbm.GbmConfig.from_config('aggregator')
    if config.max_depth > AGGREGATOR_MAX_DEPTH:
        raise ValueError("Aggregator trees are limited to depth %d, got %d" % (AGGREGATOR_MAX_DEPTH,
                                                                               config.max_depth))
    matrix = aggregator_matrix(stage2_scores, visual_scores, features)
    labels = np.asarray(labels, dtype=np.float64)
    predicate_ids = np.asarray(predicate_ids)
    if feature_names is None:
        feature_names = ['stage2_score', 'visual_score'] + ['f%d' % idx for idx in range(matrix.shape[1] - 2)]
    if validation is not None:
        valid_matrix = aggregator_matrix(*validation[:3])
        valid_labels = np.asarray(validation[3], dtype=np.float64)
        valid_predicates = np.asarray(validation[4])
    models = {}
    for predicate_id in sorted(set(predicate_ids.tolist())):
        rows = predicate_ids == predicate_id
        valid = None
        if validation is not None and np.any(valid_predicates == predicate_id):
            keep = valid_predicates == predicate_id
            valid = (valid_matrix[keep], valid_labels[keep])
        LOG.info("Training aggregator for predicate %d on %d pairs", predicate_id, int(rows.sum()))
        models[int(predicate_id)] = gbm.train(matrix[rows], labels[rows], config, validation=valid,
                                              feature_names=feature_names)
    return AggregatorModel(models, layout_fingerprint(feature_names), config=config.to_dict())


class Stage3Dataset(NamedTuple):
    """Row-aligned inputs of the aggregator."""

    stage2_scores: np.ndarray
    visual_scores: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    predicate_ids: np.ndarray

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        if not parts:
            return None
        return cls(*[np.concatenate([getattr(part, field) for part in parts]) for field in cls._fields])


def build_stage3_dataset(bank, annotations, image_ids, stats, table, policy=None, neutral=None):
    """Aggregator inputs over the ground-truth candidate pairs of *image_ids*.

    Predicates missing from *bank* are left out. With the ``strict``
    policy pairs without visual score are left out too.
    """
    parts = []
    for predicate_id, model in bank.models.items():
        data = build_pair_dataset(annotations, image_ids, stats, annotations.triplet_vocab, predicate_id)
        if not len(data.labels):
            continue
        stage2 = gbm.predict_proba(model, data.features)
        instances = [RelationInstance(subject.image_id, subject, obj, predicate_id, float(score))
                     for (subject, obj), score in zip(data.pairs, stage2)]
        joined, _missing = join_visual_scores(instances, table, policy, neutral)
        kept = {id(item.instance): item.visual_score for item in joined}
        rows = np.array([id(inst) in kept for inst in instances], dtype=bool)
        visual = np.array([kept[id(inst)] for inst in instances if id(inst) in kept], dtype=np.float64)
        parts.append(Stage3Dataset(stage2[rows], visual, data.features[rows], data.labels[rows],
                                   np.full(int(rows.sum()), predicate_id, dtype=np.int64)))
    return Stage3Dataset.concatenate(parts)


def fit_aggregator(bank, annotations, split, stats, table, config=None, policy=None, neutral=None):
    """Train the aggregator on the stage-three images, validating on the validation images.

    Predicates whose stage-three pairs are all positive or all negative are
    skipped with a warning.
    """
    check_disjoint(split, split.stage2, split.stage3)
    train_set = build_stage3_dataset(bank, annotations, split.stage3, stats, table, policy, neutral)
    if train_set is None:
        raise gbm.EmptyFeatures("No stage-3 candidate pairs to train the aggregator on")
    usable = []
    for predicate_id in sorted(set(train_set.predicate_ids.tolist())):
        labels = train_set.labels[train_set.predicate_ids == predicate_id]
        if labels.min() == labels.max():
            LOG.warning("Skipping aggregator for predicate %r: stage-3 labels are all %d",
                        annotations.triplet_vocab.predicate_name(predicate_id), int(labels[0]))
        else:
            usable.append(predicate_id)
    keep = np.isin(train_set.predicate_ids, usable)
    valid_set = build_stage3_dataset(bank, annotations, split.validation, stats, table, policy, neutral)
    aggregator = train_aggregator(*[column[keep] for column in train_set], config=config,
                                  feature_names=aggregator_feature_names(stats), validation=valid_set)
    aggregator.predicate_names = _predicate_names(annotations.triplet_vocab, aggregator.models)
    return aggregator


def aggregate(aggregator, joined, stats):
    """Rescore joined instances with the aggregator.

    Instances of predicates the aggregator has no model for keep their
    stage-two score.
    """
    expected = layout_fingerprint(aggregator_feature_names(stats))
    if aggregator.fingerprint != expected:
        raise FingerprintMismatch("Aggregator layout %s does not match %s" % (aggregator.fingerprint, expected))
    joined = list(joined)
    scores = np.array([item.instance.score for item in joined], dtype=np.float64)
    by_predicate = {}
    for idx, item in enumerate(joined):
        by_predicate.setdefault(item.instance.predicate_id, []).append(idx)
    for predicate_id, rows in sorted(by_predicate.items()):
        if predicate_id not in aggregator:
            continue
        items = [joined[idx] for idx in rows]
        matrix = aggregator_matrix([item.instance.score for item in items],
                                   [item.visual_score for item in items],
                                   extract_feature_matrix([(item.instance.subject, item.instance.object)
                                                           for item in items], stats))
        scores[rows] = gbm.predict_proba(aggregator.models[predicate_id], matrix)
    return [item.instance._replace(score=float(score)) for item, score in zip(joined, scores)]
