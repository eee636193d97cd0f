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

"""Candidate pairs, spatio-semantic pair features and visual crop geometry.

A candidate pair is an ordered (subject, object) pair of detections of one
image whose classes may be linked by a given predicate. Each pair is
described by a fixed vector made of

* the absolute geometry of the subject and of the object,
* their relative geometry (offsets, IoU, center distance, containment),
* corpus statistics: co-occurrence of the two classes, how often each class
  is seen, the predicate prior of the class pair and the predicate
  histograms of both classes in the subject and in the object role.

All counts are Laplace smoothed (+1) and enter the vector as logarithms or
normalized histograms. Slot names are returned by :func:`feature_names` and
frozen by :func:`layout_fingerprint`.
"""

import csv
import hashlib
import json
import logging
from typing import NamedTuple, Tuple

import numpy as np

from pyvrd.config import get_config
from pyvrd.core import BoundingBox, PyvrdError, box_array, intersection_areas, iou, paired_iou, union_box
from pyvrd.ingest import box_key

LOG = logging.getLogger(__name__)

EPSILON = 1e-6

GEOMETRY_SLOTS = ['cx', 'cy', 'w', 'h', 'area', 'log_aspect']
PAIRWISE_SLOTS = ['dcx', 'dcy', 'iou', 'center_distance', 'log_area_ratio', 'union_area',
                  'subject_in_object', 'object_in_subject',
                  'd_x_min', 'd_y_min', 'd_x_max', 'd_y_max']


class EmptyAnnotations(PyvrdError, ValueError):
    """Statistics cannot be fitted on an empty annotation set."""


class ZeroAreaCrop(PyvrdError, ValueError):
    """The union of the two boxes has no area, so there is nothing to crop."""


def feature_names(num_predicates):
    """Names of the pair feature slots, in vector order."""
    names = ['subject_' + slot for slot in GEOMETRY_SLOTS]
    names += ['object_' + slot for slot in GEOMETRY_SLOTS]
    names += PAIRWISE_SLOTS
    names += ['log_cooccurrence', 'subject_log_image_count', 'object_log_image_count']
    for group in ('pair_prior', 'subject_as_subject', 'subject_as_object', 'object_as_subject',
                  'object_as_object'):
        names += ['%s_p%d' % (group, pid) for pid in range(num_predicates)]
    return names


def layout_fingerprint(names):
    """Short digest identifying a feature layout."""
    return hashlib.sha1('\n'.join(names).encode('utf-8')).hexdigest()[:16]


class SemanticStats(object):
    """Class and predicate counts of a training corpus.

    Raw counts are stored; smoothing is applied when they are read.
    """

    def __init__(self, image_counts, subject_counts, object_counts, cooccurrence, triplet_counts, num_images):
        """Initialize the class instance."""
        self.image_counts = np.asarray(image_counts, dtype=np.int64)
        self.subject_counts = np.asarray(subject_counts, dtype=np.int64)
        self.object_counts = np.asarray(object_counts, dtype=np.int64)
        self.cooccurrence = np.asarray(cooccurrence, dtype=np.int64)
        self.triplet_counts = np.asarray(triplet_counts, dtype=np.int64)
        self.num_images = int(num_images)

    @property
    def num_classes(self):
        return len(self.image_counts)

    @property
    def num_predicates(self):
        return self.subject_counts.shape[1]

    @property
    def feature_names(self):
        return feature_names(self.num_predicates)

    @property
    def fingerprint(self):
        return layout_fingerprint(self.feature_names)

    @staticmethod
    def _smoothed_hist(counts):
        return (counts + 1.0) / (counts.sum(axis=-1, keepdims=True) + counts.shape[-1])

    def subject_histogram(self, class_ids):
        """Smoothed distribution of the predicates of a class in the subject role."""
        return self._smoothed_hist(self.subject_counts)[class_ids]

    def object_histogram(self, class_ids):
        """Smoothed distribution of the predicates of a class in the object role."""
        return self._smoothed_hist(self.object_counts)[class_ids]

    def smoothed_cooccurrence(self, subject_ids, object_ids):
        return self.cooccurrence[subject_ids, object_ids] + 1.0

    def pair_prior(self, subject_ids, object_ids):
        """Smoothed predicate distribution of a (subject class, object class) pair."""
        counts = self.triplet_counts[subject_ids, :, object_ids]
        return self._smoothed_hist(counts)

    def save(self, filename):
        """Save the counts to an HDF5 file."""
        import h5py

        with h5py.File(filename, 'w') as h5f:
            h5f.attrs['description'] = 'pyvrd semantic statistics'
            h5f.attrs['num_images'] = self.num_images
            h5f.attrs['fingerprint'] = self.fingerprint
            for name in ('image_counts', 'subject_counts', 'object_counts', 'cooccurrence', 'triplet_counts'):
                h5f.create_dataset(name, data=getattr(self, name))
        LOG.debug("Semantic statistics saved to %s", filename)

    @classmethod
    def load(cls, filename):
        """Load counts saved by :meth:`save`."""
        import h5py

        with h5py.File(filename, 'r') as h5f:
            return cls(h5f['image_counts'][()], h5f['subject_counts'][()], h5f['object_counts'][()],
                       h5f['cooccurrence'][()], h5f['triplet_counts'][()], h5f.attrs['num_images'])


def fit_semantic_stats(train):
    """Count classes, co-occurrences and triplets over a training annotation set."""
    if len(train) == 0 or train.num_relations == 0:
        raise EmptyAnnotations("Cannot fit semantic statistics on %r" % (train,))
    num_classes = len(train.vocabulary)
    num_predicates = train.triplet_vocab.num_predicates
    subject_counts = np.zeros((num_classes, num_predicates), dtype=np.int64)
    object_counts = np.zeros((num_classes, num_predicates), dtype=np.int64)
    triplet_counts = np.zeros((num_classes, num_predicates, num_classes), dtype=np.int64)
    cooccurrence = np.zeros((num_classes, num_classes), dtype=np.int64)

    for rel in train.all_relations():
        subject_counts[rel.subject.class_id, rel.predicate_id] += 1
        object_counts[rel.object.class_id, rel.predicate_id] += 1
        triplet_counts[rel.subject.class_id, rel.predicate_id, rel.object.class_id] += 1

    for dets in train.boxes.values():
        present, multiplicity = np.unique([det.class_id for det in dets], return_counts=True)
        if len(present) == 0:
            continue
        # ordered pairs of distinct classes, plus the diagonal for repeated classes
        block = np.ones((len(present), len(present)), dtype=np.int64)
        np.fill_diagonal(block, multiplicity > 1)
        cooccurrence[np.ix_(present, present)] += block

    stats = SemanticStats(train.image_counts.copy(), subject_counts, object_counts, cooccurrence,
                          triplet_counts, len(train))
    LOG.debug("Fitted semantic statistics on %d images and %d relations", len(train), train.num_relations)
    return stats


def generate_candidates(detections, predicate_id, triplet_vocab):
    """Ordered (subject, object) pairs of distinct detections licensed for a predicate."""
    detections = list(detections)
    if len({det.image_id for det in detections}) > 1:
        raise ValueError("Candidates are generated per image, got several image ids")
    allowed = set(triplet_vocab.pairs_for(predicate_id))
    candidates = []
    for s_idx, subject in enumerate(detections):
        for o_idx, obj in enumerate(detections):
            if s_idx != o_idx and (subject.class_id, obj.class_id) in allowed:
                candidates.append((subject, obj))
    return candidates


def _matches(subject, obj, rel, match_iou):
    if rel.subject.class_id != subject.class_id or rel.object.class_id != obj.class_id:
        return False
    if match_iou is None:
        return rel.subject.box == subject.box and rel.object.box == obj.box
    return iou(rel.subject.box, subject.box) >= match_iou and iou(rel.object.box, obj.box) >= match_iou


def label_candidates(candidates, ground_truth, predicate_id, match_iou=None, predicted_boxes=False):
    """Label candidates 1 when a ground-truth relation of the same predicate matches them.

    With *match_iou* None (candidates built from ground-truth boxes) a match
    needs identical boxes, otherwise both boxes must overlap their
    ground-truth counterparts by at least *match_iou*. Candidates built from
    *predicted_boxes* default to the configured ``features.match_iou``.
    """
    if predicted_boxes and match_iou is None:
        match_iou = get_config()['features']['match_iou']
    by_image = {}
    for rel in ground_truth:
        if rel.predicate_id == predicate_id:
            by_image.setdefault(rel.image_id, []).append(rel)
    labelled = []
    for subject, obj in candidates:
        hit = any(_matches(subject, obj, rel, match_iou) for rel in by_image.get(subject.image_id, ()))
        labelled.append(((subject, obj), int(hit)))
    return labelled


def _geometry(boxes):
    width = boxes[:, 2] - boxes[:, 0]
    height = boxes[:, 3] - boxes[:, 1]
    return np.column_stack([(boxes[:, 0] + boxes[:, 2]) / 2.0, (boxes[:, 1] + boxes[:, 3]) / 2.0,
                            width, height, width * height,
                            np.log((width + EPSILON) / (height + EPSILON))])


def extract_feature_matrix(pairs, stats):
    """Feature matrix of many (subject, object) pairs, one row per pair."""
    pairs = list(pairs)
    num_features = len(stats.feature_names)
    if not pairs:
        return np.zeros((0, num_features), dtype=np.float64)
    subjects = box_array(subject.box for subject, _ in pairs)
    objects = box_array(obj.box for _, obj in pairs)
    subject_ids = np.array([subject.class_id for subject, _ in pairs], dtype=np.intp)
    object_ids = np.array([obj.class_id for _, obj in pairs], dtype=np.intp)

    s_geo = _geometry(subjects)
    o_geo = _geometry(objects)
    s_area = s_geo[:, 4]
    o_area = o_geo[:, 4]
    inter = intersection_areas(subjects, objects)
    union_corners = np.column_stack([np.minimum(subjects[:, :2], objects[:, :2]),
                                     np.maximum(subjects[:, 2:], objects[:, 2:])])
    union_area = (union_corners[:, 2] - union_corners[:, 0]) * (union_corners[:, 3] - union_corners[:, 1])
    dcx = o_geo[:, 0] - s_geo[:, 0]
    dcy = o_geo[:, 1] - s_geo[:, 1]
    pairwise = np.column_stack([
        dcx, dcy,
        paired_iou(subjects, objects),
        np.hypot(dcx, dcy),
        np.log((s_area + EPSILON) / (o_area + EPSILON)),
        union_area,
        np.where(s_area > 0, inter / np.where(s_area > 0, s_area, 1.0), 0.0),
        np.where(o_area > 0, inter / np.where(o_area > 0, o_area, 1.0), 0.0),
        objects - subjects,
    ])

    image_counts = stats.image_counts.astype(np.float64)
    semantic = np.column_stack([
        np.log(stats.smoothed_cooccurrence(subject_ids, object_ids)),
        np.log(image_counts[subject_ids] + 1.0),
        np.log(image_counts[object_ids] + 1.0),
        stats.pair_prior(subject_ids, object_ids),
        stats.subject_histogram(subject_ids),
        stats.object_histogram(subject_ids),
        stats.subject_histogram(object_ids),
        stats.object_histogram(object_ids),
    ])
    matrix = np.hstack([s_geo, o_geo, pairwise, semantic])
    if matrix.shape[1] != num_features:
        raise AssertionError("Feature layout produced %d slots instead of %d" % (matrix.shape[1], num_features))
    return matrix


def extract_features(subject, obj, stats):
    """Feature vector of a single (subject, object) pair."""
    return extract_feature_matrix([(subject, obj)], stats)[0]


def write_feature_matrix(path, matrix, names, labels=None):
    """Write a feature matrix as CSV with one named column per slot (and a ``label`` column)."""
    matrix = np.asarray(matrix)
    with open(path, 'w', encoding='utf-8', newline='') as fd_:
        writer = csv.writer(fd_, lineterminator='\n')
        writer.writerow(list(names) + (['label'] if labels is not None else []))
        for idx, row in enumerate(matrix):
            fields = ['%.17g' % value for value in row]
            if labels is not None:
                fields.append(str(int(labels[idx])))
            writer.writerow(fields)


class CropSpec(NamedTuple):
    """Crop rectangle and the regions inside it that stay visible, in crop-local coordinates."""

    crop: BoundingBox
    keep_regions: Tuple[BoundingBox, ...]


def _to_crop_frame(box, crop):
    width = crop.x_max - crop.x_min
    height = crop.y_max - crop.y_min

    def _clip(value):
        return min(max(value, 0.0), 1.0)

    return BoundingBox(_clip((box.x_min - crop.x_min) / width), _clip((box.y_min - crop.y_min) / height),
                       _clip((box.x_max - crop.x_min) / width), _clip((box.y_max - crop.y_min) / height))


def visual_crop(subject_box, object_box):
    """Crop to the union of both boxes; everything outside the two boxes is blacked out.

    >>> visual_crop(BoundingBox(0, 0, 0.5, 0.5), BoundingBox(0, 0, 0.5, 0.5)).keep_regions
    (BoundingBox(x_min=0.0, y_min=0.0, x_max=1.0, y_max=1.0),)
    """
    crop = union_box(subject_box, object_box)
    if crop.area <= 0:
        raise ZeroAreaCrop("Union of %s and %s has no area" % (tuple(subject_box), tuple(object_box)))
    regions = [_to_crop_frame(subject_box, crop)]
    obj_region = _to_crop_frame(object_box, crop)
    if obj_region != regions[0]:
        regions.append(obj_region)
    return CropSpec(crop, tuple(regions))


def keep_area_fraction(spec):
    """Share of the crop that stays visible."""
    areas = sum(region.area for region in spec.keep_regions)
    if len(spec.keep_regions) == 2:
        areas -= intersection_areas(np.asarray(spec.keep_regions[0]), np.asarray(spec.keep_regions[1]))
    return float(areas)


def write_crop_specs(path, pairs):
    """Write one JSON line per (subject, object) pair describing its crop.

    Pairs whose union box has no area are skipped with a warning.
    """
    skipped = 0
    with open(path, 'w', encoding='utf-8', newline='\n') as fd_:
        for subject, obj in pairs:
            try:
                spec = visual_crop(subject.box, obj.box)
            except ZeroAreaCrop:
                skipped += 1
                continue
            record = {'image_id': subject.image_id,
                      'subject_key': box_key(subject.box),
                      'object_key': box_key(obj.box),
                      'crop': list(spec.crop),
                      'keep_regions': [list(region) for region in spec.keep_regions]}
            fd_.write(json.dumps(record, sort_keys=True))
            fd_.write('\n')
    if skipped:
        LOG.warning("Skipped %d pairs with a zero-area crop", skipped)


