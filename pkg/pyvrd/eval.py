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

"""Relationship detection metrics.

A predicted relation instance is a true positive when an unmatched
ground-truth instance of the same image, classes (and predicate, for the
predicate scoped evaluation) overlaps it with both boxes by at least the IoU
threshold. Predictions are matched greedily by decreasing score. The
average precision of a predicate is the area under the interpolated
precision envelope of its precision/recall curve, and ``mAP_rel`` averages
it over the predicates for which it is defined.
"""

import logging
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy.stats import rankdata

from pyvrd.config import get_config
from pyvrd.core import PyvrdError, iou
from pyvrd.utils import to_json

LOG = logging.getLogger(__name__)

VARIANTS = ('Spatio-Semantic', 'Visual', 'Avg.', '3rd Stage')


class NoDefinedPredicates(PyvrdError, ValueError):
    """No predicate has ground truth or predictions, the mean AP is undefined."""


class MatchConfig(object):
    """How predictions are matched to ground truth."""

    def __init__(self, iou_threshold=0.5, predicate_scoped=True):
        """Initialize the class instance."""
        if not 0.0 < iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1], got %r" % (iou_threshold,))
        self.iou_threshold = float(iou_threshold)
        self.predicate_scoped = bool(predicate_scoped)

    @classmethod
    def from_config(cls, **overrides):
        section = dict(get_config()['eval'])
        section.update({key: val for key, val in overrides.items() if val is not None})
        return cls(**section)

    def to_dict(self):
        return {'iou_threshold': self.iou_threshold, 'predicate_scoped': self.predicate_scoped}


class PrCurve(NamedTuple):
    """Precision/recall curve of one predicate; ``ap`` is None when undefined."""

    recall: Tuple[float, ...]
    precision: Tuple[float, ...]
    ap: Optional[float]
    num_ground_truth: int
    num_predictions: int


class MapResult(NamedTuple):
    """Mean AP over the defined predicates together with every per-predicate curve."""

    mean_ap: float
    curves: dict

    def ap(self, predicate_id):
        curve = self.curves.get(predicate_id)
        return None if curve is None else curve.ap


def _serialize(instance):
    return (instance.predicate_id, instance.subject.class_id, tuple(instance.subject.box),
            instance.object.class_id, tuple(instance.object.box))


def _match_order(predictions):
    return sorted(range(len(predictions)),
                  key=lambda idx: (-predictions[idx].score, predictions[idx].image_id,
                                   _serialize(predictions[idx])))


def _overlap(a, b):
    # attribute objects carry the empty box
    if a == b and a.area == 0:
        return 1.0
    return iou(a, b)


def _greedy_match(predictions, ground_truth, config):
    """Match flags in decreasing score order, with that order."""
    by_image = {}
    for idx, rel in enumerate(ground_truth):
        by_image.setdefault(rel.image_id, []).append(idx)
    used = np.zeros(len(ground_truth), dtype=bool)
    order = _match_order(predictions)
    flags = np.zeros(len(order), dtype=bool)
    for rank, idx in enumerate(order):
        pred = predictions[idx]
        best, best_overlap = None, -1.0
        for gt_idx in by_image.get(pred.image_id, ()):
            if used[gt_idx]:
                continue
            rel = ground_truth[gt_idx]
            if config.predicate_scoped and rel.predicate_id != pred.predicate_id:
                continue
            if rel.subject.class_id != pred.subject.class_id or rel.object.class_id != pred.object.class_id:
                continue
            overlap = min(_overlap(rel.subject.box, pred.subject.box), _overlap(rel.object.box, pred.object.box))
            if overlap >= config.iou_threshold and overlap > best_overlap:
                best, best_overlap = gt_idx, overlap
        if best is not None:
            used[best] = True
            flags[rank] = True
    return order, flags


def match_instances(predictions, ground_truth, config=None):
    """True-positive flag of every prediction, aligned with *predictions*.

    Among the free ground-truth instances a prediction qualifies for, the one
    with the largest smaller-box IoU wins; ties go to the earliest listed.
    """
    config = config or MatchConfig.from_config()
    predictions = list(predictions)
    order, flags = _greedy_match(predictions, list(ground_truth), config)
    aligned = np.zeros(len(predictions), dtype=bool)
    aligned[order] = flags
    return aligned


def voc_ap(recall, precision):
    """Area under the monotone precision envelope of a precision/recall curve.

    >>> voc_ap([0.0, 1.0], [0.0, 0.5])
    0.5
    """
    mrec = np.concatenate(([0.0], np.asarray(recall, dtype=np.float64), [1.0]))
    mpre = np.concatenate(([0.0], np.asarray(precision, dtype=np.float64), [0.0]))
    for idx in range(mpre.size - 1, 0, -1):
        mpre[idx - 1] = np.maximum(mpre[idx - 1], mpre[idx])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap_rel(predictions, ground_truth, predicate_id, config=None):
    """Precision/recall curve and average precision of one predicate."""
    config = config or MatchConfig.from_config()
    preds = [rel for rel in predictions if rel.predicate_id == predicate_id]
    if config.predicate_scoped:
        gts = [rel for rel in ground_truth if rel.predicate_id == predicate_id]
    else:
        gts = list(ground_truth)
    if not gts:
        ap = None if not preds else 0.0
        return PrCurve((), (), ap, 0, len(preds))
    if not preds:
        return PrCurve((), (), 0.0, len(gts), 0)
    _order, flags = _greedy_match(preds, gts, config)
    true_pos = np.cumsum(flags)
    false_pos = np.cumsum(~flags)
    recall = true_pos / float(len(gts))
    precision = true_pos / np.maximum(true_pos + false_pos, np.finfo(np.float64).eps)
    return PrCurve(tuple(recall.tolist()), tuple(precision.tolist()), voc_ap(recall, precision),
                   len(gts), len(preds))


def map_rel(predictions, ground_truth, config=None, predicates=None):
    """Mean of the defined per-predicate APs.

    *predicates* defaults to every predicate seen in the predictions or the
    ground truth.
    """
    config = config or MatchConfig.from_config()
    predictions = list(predictions)
    ground_truth = list(ground_truth)
    if predicates is None:
        predicates = {rel.predicate_id for rel in predictions} | {rel.predicate_id for rel in ground_truth}
    curves = {pid: ap_rel(predictions, ground_truth, pid, config) for pid in sorted(predicates)}
    defined = [curve.ap for curve in curves.values() if curve.ap is not None]
    if not defined:
        raise NoDefinedPredicates("AP is undefined for all of %d predicates" % len(curves))
    return MapResult(float(np.mean(defined)), curves)


def roc_auc(labels, scores):
    """Area under the ROC curve, ties counted as one half.

    >>> roc_auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8])
    0.75
    """
    labels = np.asarray(labels).astype(bool)
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise ValueError("ROC AUC needs both positive and negative labels")
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    return float((ranks[labels].sum() - positives * (positives + 1) / 2.0) / (positives * negatives))


class RelationReport(object):
    """Per-predicate AP of several scoring variants, rendered as a table or JSON."""

    def __init__(self, predicate_names, config=None):
        """Initialize the class instance.

        *predicate_names* maps predicate ids to names, in display order.
        """
        self.predicate_names = dict(predicate_names)
        self.config = config or MatchConfig.from_config()
        self.results = {}

    def add(self, variant, result):
        self.results[variant] = result

    def evaluate(self, variant, predictions, ground_truth):
        """Score one variant and add it to the report."""
        result = map_rel(predictions, ground_truth, self.config, predicates=self.predicate_names)
        self.add(variant, result)
        LOG.info("%s: mAP_rel %.4f", variant, result.mean_ap)
        return result

    def to_dict(self):
        variants = list(self.results)
        per_predicate = {}
        for pid, name in self.predicate_names.items():
            per_predicate[name] = {variant: self.results[variant].ap(pid) for variant in variants}
        return {'variants': variants,
                'map_rel': {variant: result.mean_ap for variant, result in self.results.items()},
                'per_predicate': per_predicate,
                'config': self.config.to_dict()}

    def to_json(self):
        return to_json(self.to_dict())

    def render(self):
        """Plain text table, one row per predicate and a final mAP row."""
        variants = list(self.results)
        width = max([len('Predicate'), len('mAP_rel')] + [len(name) for name in self.predicate_names.values()])
        columns = [max(len(variant), 8) for variant in variants]

        def _row(label, cells):
            return '  '.join([label.ljust(width)] + [cell.rjust(col) for cell, col in zip(cells, columns)])

        def _cell(value):
            return '-' if value is None else '%.4f' % value

        lines = [_row('Predicate', variants)]
        lines.append('-' * len(lines[0]))
        for pid, name in self.predicate_names.items():
            lines.append(_row(name, [_cell(self.results[variant].ap(pid)) for variant in variants]))
        lines.append('-' * len(lines[0]))
        lines.append(_row('mAP_rel', [_cell(self.results[variant].mean_ap) for variant in variants]))
        return '\n'.join(lines)
