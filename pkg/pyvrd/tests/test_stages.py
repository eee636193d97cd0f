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

"""Unit testing the stage-two and stage-three pipeline."""

import json
import logging
import os
import tempfile
import unittest

import numpy as np
import pytest

from pyvrd import gbm
from pyvrd.eval import MatchConfig, map_rel, roc_auc
from pyvrd.features import fit_semantic_stats
from pyvrd.ingest import ScoreTable, box_key
from pyvrd.stages import (AggregatorModel, FingerprintMismatch, MissingVisualScore, RelationshipModelBank,
                          SplitLeakage, SplitPlan, aggregate, average_instances, build_pair_dataset,
                          build_stage3_dataset, check_disjoint, fit_aggregator, join_visual_scores,
                          make_split_plan, score_pairs, train_aggregator, train_stage2, visual_instances)
from pyvrd.synthetic import generate_corpus, synthetic_visual_scores
from pyvrd.tests.data import det, relation

STAGE2_CONFIG = gbm.GbmConfig(max_depth=6, rounds=40, learning_rate=0.3, early_stopping_interval=20)
AGGREGATOR_CONFIG = gbm.GbmConfig(max_depth=3, rounds=30, learning_rate=0.3, early_stopping_interval=10)


class TestSplitPlan(unittest.TestCase):
    """Test the image-disjoint split."""

    def setUp(self):
        """Draw a small corpus."""
        self.corpus = generate_corpus(40, seed=1)

    def test_partition(self):
        plan = make_split_plan(self.corpus, [0.5, 0.25, 0.25], seed=3)
        self.assertEqual((len(plan.stage2), len(plan.stage3), len(plan.validation)), (20, 10, 10))
        self.assertEqual(sorted(plan.stage2 + plan.stage3 + plan.validation), self.corpus.image_ids())
        again = make_split_plan(self.corpus, [0.5, 0.25, 0.25], seed=3)
        self.assertEqual(plan.to_dict(), again.to_dict())
        self.assertNotEqual(plan.to_dict(), make_split_plan(self.corpus, [0.5, 0.25, 0.25], seed=4).to_dict())

    def test_every_part_gets_an_image(self):
        plan = make_split_plan(self.corpus.subset(self.corpus.image_ids()[:3]), [0.98, 0.01, 0.01])
        self.assertEqual((len(plan.stage2), len(plan.stage3), len(plan.validation)), (1, 1, 1))

    def test_bad_proportions(self):
        for proportions in ([0.5, 0.5], [1.0, -0.5, 0.5], [0, 0, 0]):
            with self.assertRaises(ValueError):
                make_split_plan(self.corpus, proportions)

    def test_leakage(self):
        with self.assertRaises(SplitLeakage):
            SplitPlan(['a', 'b'], ['b'], [])
        plan = SplitPlan(['a'], ['b'], ['c'])
        with self.assertRaises(SplitLeakage):
            check_disjoint(plan, ['a', 'c'], plan.validation)
        check_disjoint(plan, plan.stage2, plan.stage3)


def test_split_plan_file(tmp_path):
    """A saved split loads back unchanged."""
    plan = SplitPlan(['b', 'a'], ['c'], ['d', 'e'])
    path = str(tmp_path / 'split.json')
    plan.save(path)
    assert SplitPlan.load(path).to_dict() == {'stage2': ['a', 'b'], 'stage3': ['c'], 'validation': ['d', 'e']}


def test_repeated_images_repeat_pairs():
    """A repeated image id contributes its candidate pairs once per occurrence."""
    corpus = generate_corpus(5, seed=2)
    stats = fit_semantic_stats(corpus)
    image_id = corpus.image_ids()[0]
    once = build_pair_dataset(corpus, [image_id], stats, corpus.triplet_vocab, 0)
    twice = build_pair_dataset(corpus, [image_id, image_id], stats, corpus.triplet_vocab, 0)
    assert len(twice.pairs) == 2 * len(once.pairs)
    np.testing.assert_array_equal(twice.features, np.vstack([once.features, once.features]))
    assert twice.features.shape[1] == len(stats.feature_names)


class TestPipeline(unittest.TestCase):
    """Train both stages on a synthetic corpus."""

    @classmethod
    def setUpClass(cls):
        """Train the stage-two bank and the aggregator once."""
        cls.corpus = generate_corpus(160, seed=7)
        cls.vocab = cls.corpus.triplet_vocab
        cls.split = make_split_plan(cls.corpus, [0.5, 0.25, 0.25], seed=7)
        cls.stats = fit_semantic_stats(cls.corpus.subset(cls.split.stage2))
        cls.bank = train_stage2(cls.corpus, cls.stats, cls.split, config=STAGE2_CONFIG, parallel=False)
        cls.table = synthetic_visual_scores(cls.corpus, seed=7, image_ids=cls.split.stage3 + cls.split.validation)
        cls.aggregator = fit_aggregator(cls.bank, cls.corpus, cls.split, cls.stats, cls.table,
                                        config=AGGREGATOR_CONFIG, policy='raise')

    def _validation_detections(self):
        return [det_ for image_id in self.split.validation for det_ in self.corpus.boxes[image_id]]

    def _validation_relations(self):
        attr = self.vocab.attribute_predicate_id
        return [rel for image_id in self.split.validation for rel in self.corpus.relations[image_id]
                if rel.predicate_id != attr]

    def test_bank_covers_relation_predicates(self):
        self.assertEqual(sorted(self.bank.models), self.vocab.relation_predicates())
        self.assertEqual(self.bank.fingerprint, self.stats.fingerprint)
        self.assertEqual(self.bank.predicate_names[0], 'above')
        self.assertEqual(self.bank.config['max_depth'], 6)

    def test_attribute_predicate_is_skipped(self):
        with self.assertLogs('pyvrd.stages', level=logging.WARNING) as logs:
            bank = train_stage2(self.corpus, self.stats, self.split, config=STAGE2_CONFIG.replace(rounds=2),
                                predicates=[self.vocab.attribute_predicate_id], parallel=False)
        self.assertEqual(len(bank), 0)
        self.assertIn("Skipping attribute predicate 'is'", logs.output[0])

    def test_stage2_refuses_leaking_sample(self):
        with self.assertRaises(SplitLeakage):
            train_stage2(self.corpus, self.stats, self.split, config=STAGE2_CONFIG,
                         image_ids=self.split.stage2 + self.split.stage3[:1], parallel=False)

    def test_stage2_recovers_planted_relations(self):
        predictions = score_pairs(self.bank, self._validation_detections(), self.stats, self.vocab,
                                  score_floor=0.0, top_m=10000)
        result = map_rel(predictions, self._validation_relations(), MatchConfig(),
                         predicates=self.vocab.relation_predicates())
        self.assertGreaterEqual(result.mean_ap, 0.8)

    def test_score_floor_and_top_m(self):
        detections = self._validation_detections()
        floored = score_pairs(self.bank, detections, self.stats, self.vocab, score_floor=0.5, top_m=10000)
        self.assertTrue(all(inst.score >= 0.5 for inst in floored))
        capped = score_pairs(self.bank, detections, self.stats, self.vocab, score_floor=0.0, top_m=2)
        per_image = {}
        for inst in capped:
            per_image.setdefault(inst.image_id, []).append(inst.score)
        self.assertTrue(all(len(scores) <= 2 for scores in per_image.values()))
        for scores in per_image.values():
            self.assertEqual(scores, sorted(scores, reverse=True))
        image_ids = [inst.image_id for inst in capped]
        self.assertEqual(image_ids, sorted(image_ids))

    def test_layout_mismatch(self):
        other = RelationshipModelBank({}, 'feedfacefeedface')
        with self.assertRaises(FingerprintMismatch):
            score_pairs(other, self._validation_detections(), self.stats, self.vocab)
        with self.assertRaises(FingerprintMismatch):
            RelationshipModelBank(dict(self.bank.models), 'feedfacefeedface')
        with self.assertRaises(FingerprintMismatch):
            aggregate(AggregatorModel({}, 'feedfacefeedface'), [], self.stats)

    def test_bank_directory(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            self.bank.save(tmp_dir)
            with open(os.path.join(tmp_dir, 'manifest.json')) as fd_:
                manifest = json.load(fd_)
            self.assertEqual(manifest['kind'], 'stage2')
            self.assertEqual(manifest['files']['0'], 'predicate_000.gbm')
            loaded = RelationshipModelBank.load(tmp_dir)
            with self.assertRaises(ValueError):
                AggregatorModel.load(tmp_dir)
        self.assertEqual(loaded.predicate_names, self.bank.predicate_names)
        detections = self._validation_detections()
        self.assertEqual(score_pairs(loaded, detections, self.stats, self.vocab),
                         score_pairs(self.bank, detections, self.stats, self.vocab))

    def test_stage3_dataset(self):
        data = build_stage3_dataset(self.bank, self.corpus, self.split.stage3, self.stats, self.table,
                                    policy='raise')
        rows = len(data.labels)
        self.assertGreater(rows, 0)
        for column in data:
            self.assertEqual(len(column), rows)
        self.assertTrue(np.all((data.stage2_scores >= 0) & (data.stage2_scores <= 1)))
        self.assertEqual(set(data.predicate_ids.tolist()), set(self.bank.models))
        # without visual scores the strict policy leaves nothing
        empty = build_stage3_dataset(self.bank, self.corpus, self.split.stage3, self.stats, ScoreTable(),
                                     policy='strict')
        self.assertEqual(len(empty.labels), 0)

    def test_aggregate(self):
        self.assertEqual(sorted(self.aggregator.models), self.vocab.relation_predicates())
        self.assertEqual(self.aggregator.predicate_names[2], 'next_to')
        predictions = score_pairs(self.bank, self._validation_detections(), self.stats, self.vocab,
                                  score_floor=0.0, top_m=10000)
        joined, missing = join_visual_scores(predictions, self.table, policy='raise')
        self.assertEqual(missing, [])
        rescored = aggregate(self.aggregator, joined, self.stats)
        self.assertEqual(len(rescored), len(joined))
        self.assertTrue(all(0.0 <= inst.score <= 1.0 for inst in rescored))
        self.assertEqual([inst._replace(score=1.0) for inst in rescored],
                         [item.instance._replace(score=1.0) for item in joined])
        untouched = aggregate(AggregatorModel({}, self.aggregator.fingerprint), joined, self.stats)
        self.assertEqual(untouched, [item.instance for item in joined])

    def test_top_prediction_follows_the_rule(self):
        predictions = score_pairs(self.bank, self._validation_detections(), self.stats, self.vocab,
                                  score_floor=0.0, top_m=1)
        truth = {(rel.image_id, rel.subject, rel.object, rel.predicate_id) for rel in self._validation_relations()}
        related = {rel.image_id for rel in self._validation_relations()}
        hits = [(inst.image_id, inst.subject, inst.object, inst.predicate_id) in truth
                for inst in predictions if inst.image_id in related]
        self.assertEqual(len(hits), len(related))
        self.assertGreaterEqual(np.mean(hits), 0.9)

    def test_empty_and_neutral_models(self):
        self.assertEqual(score_pairs(self.bank, [], self.stats, self.vocab), [])
        num_features = len(self.stats.feature_names)
        flat = gbm.GbmModel([gbm.RegressionTree.leaf(0.0)], [1.0], 0.0, 'gbtree', self.stats.fingerprint,
                            num_features)
        bank = RelationshipModelBank({0: flat}, self.stats.fingerprint)
        pair = [det('img', 0, 0.1, 0.1, 0.2, 0.2), det('img', 1, 0.1, 0.5, 0.2, 0.6)]
        scored = score_pairs(bank, pair, self.stats, self.vocab, score_floor=0.0)
        self.assertEqual([inst.score for inst in scored], [0.5, 0.5])

    def test_stage2_is_deterministic(self):
        config = STAGE2_CONFIG.replace(rounds=5, subsample=0.5, seed=11)
        first = train_stage2(self.corpus, self.stats, self.split, config=config, predicates=[0], parallel=False)
        second = train_stage2(self.corpus, self.stats, self.split, config=config, predicates=[0], parallel=False)
        self.assertEqual(gbm.dumps_model(first.models[0]), gbm.dumps_model(second.models[0]))


class TestVisualJoin(unittest.TestCase):
    """Test joining visual scores to stage-two instances."""

    def setUp(self):
        """Two instances, one of them in the score table."""
        subject = det('img', 0, 0.1, 0.1, 0.2, 0.2)
        obj = det('img', 1, 0.3, 0.3, 0.5, 0.5)
        self.known = relation(subject, obj, 0, score=0.66)
        self.unknown = relation(obj, subject, 0, score=0.4)
        self.table = ScoreTable({('img', box_key(subject.box), box_key(obj.box), 0): 0.34})

    def test_neutral(self):
        joined, missing = join_visual_scores([self.known, self.unknown], self.table, policy='neutral', neutral=0.5)
        self.assertEqual([item.visual_score for item in joined], [0.34, 0.5])
        self.assertEqual(missing, [])
        np.testing.assert_allclose([inst.score for inst in average_instances(joined)], [0.5, 0.45])
        self.assertEqual([inst.score for inst in visual_instances(joined)], [0.34, 0.5])

    def test_strict(self):
        with self.assertLogs('pyvrd.stages', level=logging.WARNING):
            joined, missing = join_visual_scores([self.known, self.unknown], self.table, policy='strict')
        self.assertEqual([item.instance for item in joined], [self.known])
        self.assertEqual(missing, [{'error': 'MissingVisualScore', 'image_id': 'img',
                                    'subject_key': '0.300000/0.300000/0.500000/0.500000',
                                    'object_key': '0.100000/0.100000/0.200000/0.200000', 'predicate': 0}])

    def test_raise(self):
        with self.assertRaises(MissingVisualScore):
            join_visual_scores([self.known, self.unknown], self.table, policy='raise')

    def test_unknown_policy(self):
        with self.assertRaises(ValueError):
            join_visual_scores([self.known], self.table, policy='lenient')


def test_aggregator_depth_limit():
    """Aggregator trees deeper than eight levels are refused."""
    rng = np.random.Generator(np.random.PCG64(0))
    with pytest.raises(ValueError):
        train_aggregator(rng.random(10), rng.random(10), rng.random((10, 3)), [0, 1] * 5, [0] * 10,
                         config=gbm.GbmConfig(max_depth=9))


def test_aggregator_uses_visual_score():
    """With a visual score that equals the label, the aggregator follows it."""
    rng = np.random.Generator(np.random.PCG64(1))
    labels = rng.integers(0, 2, size=200)
    visual = np.where(labels == 1, 0.9, 0.1)
    aggregator = train_aggregator(rng.random(200), visual, rng.random((200, 2)), labels, [3] * 200,
                                  config=AGGREGATOR_CONFIG)
    assert list(aggregator.models) == [3]
    model = aggregator.models[3]
    matrix = np.array([[0.5, 0.9, 0.5, 0.5], [0.5, 0.1, 0.5, 0.5]])
    high, low = gbm.predict_proba(model, matrix)
    assert high > 0.9 > 0.1 > low


def _signal(rng, labels, informative):
    """Scores that separate the labels where *informative* holds, uniform noise elsewhere."""
    separated = np.where(labels == 1, rng.uniform(0.6, 1.0, labels.size), rng.uniform(0.0, 0.4, labels.size))
    return np.where(informative, separated, rng.uniform(0.0, 1.0, labels.size))


def _aggregator_auc(rng, stage2_informative, visual_informative, rows=3000):
    labels = rng.integers(0, 2, size=rows)
    group = rng.uniform(0.0, 1.0, size=rows)
    stage2 = _signal(rng, labels, stage2_informative(group))
    visual = _signal(rng, labels, visual_informative(group))
    features = np.column_stack([group, rng.uniform(0.0, 1.0, size=rows)])
    train, test = slice(0, 2000), slice(2000, rows)
    aggregator = train_aggregator(stage2[train], visual[train], features[train], labels[train], [0] * 2000,
                                  config=AGGREGATOR_CONFIG)
    combined = gbm.predict_proba(aggregator.models[0],
                                 np.column_stack([stage2[test], visual[test], features[test]]))
    return roc_auc(labels[test], combined), roc_auc(labels[test], stage2[test]), roc_auc(labels[test], visual[test])


def test_aggregator_ignores_a_noise_input():
    """An oracle stage-two score is not degraded by a noise visual score."""
    rng = np.random.Generator(np.random.PCG64(2))
    combined, stage2, _visual = _aggregator_auc(rng, lambda group: np.ones(group.size, dtype=bool),
                                                lambda group: np.zeros(group.size, dtype=bool))
    assert combined >= stage2 - 0.01


def test_aggregator_combines_complementary_inputs():
    """Each input is right on one half of the pairs; the aggregator is right on both."""
    rng = np.random.Generator(np.random.PCG64(3))
    combined, stage2, visual = _aggregator_auc(rng, lambda group: group < 0.5, lambda group: group >= 0.5)
    assert combined > max(stage2, visual) + 0.05
