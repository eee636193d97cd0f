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

"""Weighted non-maximum suppression over the detections of several models.

Detections of one class in one image are pooled across models. The most
confident unconsumed box seeds a cluster that absorbs every unconsumed box
overlapping it by at least the IoU threshold. Instead of keeping the seed,
the cluster is replaced by one box whose corners are averaged with weights
``model weight * confidence`` and whose confidence is the model-weighted
mean of the member confidences.
"""

import logging
from typing import List, NamedTuple

import numpy as np

from pyvrd.config import get_config
from pyvrd.core import BoundingBox, Detection, PyvrdError, box_array, iou, iou_matrix

LOG = logging.getLogger(__name__)


class EmptyInput(PyvrdError, ValueError):
    """No model output was given."""


class ModelOutput(NamedTuple):
    """The detections of one model and the weight its votes carry."""

    model_id: str
    weight: float
    detections: List[Detection]


class NmsConfig(object):
    """Thresholds of the weighted NMS."""

    def __init__(self, iou_threshold=0.5, score_floor=0.001):
        """Initialize the class instance."""
        if not 0.0 < iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1], got %r" % (iou_threshold,))
        if not 0.0 <= score_floor <= 1.0:
            raise ValueError("score_floor must lie in [0, 1], got %r" % (score_floor,))
        self.iou_threshold = float(iou_threshold)
        self.score_floor = float(score_floor)

    @classmethod
    def from_config(cls, **overrides):
        section = dict(get_config()['ensemble'])
        section.update({key: val for key, val in overrides.items() if val is not None})
        return cls(**section)


class _Vote(NamedTuple):
    box: BoundingBox
    confidence: float
    model_id: str
    weight: float


def parse_model_argument(text):
    """Split a ``path:weight`` command line argument; the weight defaults to 1.

    >>> parse_model_argument('runs/cascade.csv:0.7')
    ('runs/cascade.csv', 0.7)
    """
    path, sep, weight = text.rpartition(':')
    if not sep:
        return text, 1.0
    try:
        value = float(weight)
    except ValueError:
        return text, 1.0
    if not value > 0:
        raise ValueError("Model weight must be positive in %r" % (text,))
    return path, value


def _pool(outputs):
    """Group votes per (image, class), each bucket sorted in seed order."""
    if not outputs:
        raise EmptyInput("Weighted NMS needs at least one model output")
    for output in outputs:
        if not output.weight > 0:
            raise ValueError("Model %r has non-positive weight %r" % (output.model_id, output.weight))
    top = max(output.weight for output in outputs)
    buckets = {}
    for output in outputs:
        weight = output.weight / top
        for det in output.detections:
            vote = _Vote(det.box, det.confidence, output.model_id, weight)
            buckets.setdefault((det.image_id, det.class_id), []).append(vote)
    for votes in buckets.values():
        votes.sort(key=lambda vote: (-vote.confidence, vote.model_id, tuple(vote.box)))
    return buckets


def _fuse(image_id, class_id, members):
    """Collapse a cluster of votes into one detection."""
    if len(members) == 1:
        only = members[0]
        return Detection(image_id, class_id, only.box, min(max(only.confidence, 0.0), 1.0))
    coord_weights = [vote.weight * vote.confidence for vote in members]
    total = sum(coord_weights)
    if total <= 0:
        coord_weights = [vote.weight for vote in members]
        total = sum(coord_weights)
    corners = [sum(cw * vote.box[idx] for cw, vote in zip(coord_weights, members)) / total for idx in range(4)]
    x_min, y_min, x_max, y_max = [min(max(value, 0.0), 1.0) for value in corners]
    box = BoundingBox(x_min, y_min, max(x_min, x_max), max(y_min, y_max))
    confidence = sum(vote.weight * vote.confidence for vote in members) / sum(vote.weight for vote in members)
    return Detection(image_id, class_id, box, min(max(confidence, 0.0), 1.0))


def _finish(fused, config):
    kept = [det for det in fused if det.confidence >= config.score_floor]
    kept.sort(key=lambda det: (-det.confidence, det.image_id, det.class_id, tuple(det.box)))
    return kept


def _cluster_bucket(votes, threshold):
    """Greedy clusters of one bucket, using vectorized IoU against the seed."""
    boxes = box_array(vote.box for vote in votes)
    consumed = np.zeros(len(votes), dtype=bool)
    clusters = []
    for seed in range(len(votes)):
        if consumed[seed]:
            continue
        overlaps = iou_matrix(boxes[seed], boxes)[0]
        members = np.flatnonzero(~consumed & (overlaps >= threshold))
        members = np.union1d(members, [seed]).astype(np.intp)
        consumed[members] = True
        clusters.append([votes[idx] for idx in members])
    return clusters


def weighted_nms(outputs, config=None):
    """Fuse the detections of several models by weighted NMS.

    Model weights are relative: only their ratios matter. Returns detections
    sorted by confidence, highest first.
    """
    config = config or NmsConfig.from_config()
    buckets = _pool(outputs)
    fused = []
    for (image_id, class_id) in sorted(buckets):
        for members in _cluster_bucket(buckets[(image_id, class_id)], config.iou_threshold):
            fused.append(_fuse(image_id, class_id, members))
    result = _finish(fused, config)
    LOG.debug("Fused %d detections from %d models into %d",
              sum(len(votes) for votes in buckets.values()), len(outputs), len(result))
    return result


def brute_force_nms_oracle(outputs, config=None):
    """Reference weighted NMS written with plain loops over every pair of votes.

    Pooling, clustering and fusion are all spelled out here so the result
    can be checked against :func:`weighted_nms`.
    """
    config = config or NmsConfig.from_config()
    if not outputs:
        raise EmptyInput("Weighted NMS needs at least one model output")
    if any(not output.weight > 0 for output in outputs):
        raise ValueError("Model weights must be positive")
    top = max(output.weight for output in outputs)
    votes = {}
    for output in outputs:
        for det in output.detections:
            votes.setdefault((det.image_id, det.class_id), []).append(
                (det.box, det.confidence, output.model_id, output.weight / top))

    fused = []
    for image_id, class_id in sorted(votes):
        bucket = sorted(votes[(image_id, class_id)], key=lambda vote: (-vote[1], vote[2], tuple(vote[0])))
        consumed = [False] * len(bucket)
        for seed in range(len(bucket)):
            if consumed[seed]:
                continue
            members = []
            for idx in range(len(bucket)):
                if consumed[idx]:
                    continue
                if idx == seed or iou(bucket[seed][0], bucket[idx][0]) >= config.iou_threshold:
                    members.append(bucket[idx])
                    consumed[idx] = True
            if len(members) == 1:
                box, confidence = members[0][0], members[0][1]
            else:
                # coordinates weighted by weight * confidence, by weight alone when all confidences are 0
                coord_weights = [weight * conf for _box, conf, _model, weight in members]
                if sum(coord_weights) <= 0:
                    coord_weights = [weight for _box, _conf, _model, weight in members]
                total = sum(coord_weights)
                corners = []
                for idx in range(4):
                    value = sum(cw * member[0][idx] for cw, member in zip(coord_weights, members)) / total
                    corners.append(min(max(value, 0.0), 1.0))
                box = BoundingBox(corners[0], corners[1], max(corners[0], corners[2]), max(corners[1], corners[3]))
                confidence = (sum(weight * conf for _box, conf, _model, weight in members) /
                              sum(weight for _box, _conf, _model, weight in members))
            confidence = min(max(confidence, 0.0), 1.0)
            if confidence >= config.score_floor:
                fused.append(Detection(image_id, class_id, box, confidence))
    fused.sort(key=lambda det: (-det.confidence, det.image_id, det.class_id, tuple(det.box)))
    return fused
