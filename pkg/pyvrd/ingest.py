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

"""Readers and writers for the annotation, detection, prediction and score files.

All tables are UTF-8 CSV files with a header row, LF line endings and ``.``
as decimal separator. Boxes are written X pair first, as in the Open Images
annotation files: ``XMin,XMax,YMin,YMax``.
"""

import csv
import logging
import os

import numpy as np
import yaml

from pyvrd.config import get_config
from pyvrd.core import (EMPTY_BOX, BoundingBox, ClassVocabulary, Detection, PyvrdError, RelationInstance,
                        TripletVocabulary, UnknownClassName)

LOG = logging.getLogger(__name__)

DETECTION_COLUMNS = ['ImageID', 'LabelName', 'XMin', 'XMax', 'YMin', 'YMax']
SCORE_COLUMN = 'Score'
RELATION_COLUMNS = ['ImageID',
                    'LabelName1', 'XMin1', 'XMax1', 'YMin1', 'YMax1',
                    'LabelName2', 'XMin2', 'XMax2', 'YMin2', 'YMax2',
                    'RelationshipLabel']
PREDICTION_COLUMNS = RELATION_COLUMNS + ['Confidence1', 'Confidence2', 'Score']
SCORE_TABLE_COLUMNS = ['ImageID', 'SubjKey', 'ObjKey', 'Predicate', 'Score']

FLOAT_FORMAT = '%.17g'
BOX_KEY_DECIMALS = 6


class MalformedRow(PyvrdError, ValueError):
    """A row (or the header) of an input file cannot be parsed."""

    def __init__(self, path, line, reason):
        """Initialize the class instance."""
        self.path = path
        self.line = line
        self.reason = reason
        super(MalformedRow, self).__init__("%s:%d: %s" % (path, line, reason))


class UnknownTriplet(PyvrdError, ValueError):
    """A relation names a subject/predicate/object combination absent from the vocabulary."""


class DuplicateKey(PyvrdError, KeyError):
    """The same key appears twice in a score table."""

    def __str__(self):
        return str(self.args[0]) if self.args else ''


class BadVocabulary(PyvrdError, ValueError):
    """A vocabulary file holds something other than lists of names."""


class _NameLoader(yaml.SafeLoader):
    """SafeLoader that reads yes, no, on and off as plain strings."""


_NameLoader.yaml_implicit_resolvers = {
    first: [(tag, regexp) for tag, regexp in resolvers if tag != 'tag:yaml.org,2002:bool']
    for first, resolvers in yaml.SafeLoader.yaml_implicit_resolvers.items()}


def load_vocabulary_yaml(stream, source='<string>'):
    """Parse vocabulary YAML content, keeping every name a string.

    >>> load_vocabulary_yaml("predicates: [on, yes]")['predicates']
    ['on', 'yes']
    """
    content = yaml.load(stream, Loader=_NameLoader) or {}
    if not isinstance(content, dict):
        raise BadVocabulary("%s: expected a mapping at the top level" % source)
    for key in ('classes', 'attributes', 'predicates'):
        names = content.get(key) or []
        if not isinstance(names, list) or not all(isinstance(name, str) for name in names):
            raise BadVocabulary("%s: %s must be a list of names, got %r" % (source, key, names))
    for triplet in content.get('triplets') or []:
        if (not isinstance(triplet, list) or len(triplet) != 3 or
                not all(isinstance(name, str) for name in triplet)):
            raise BadVocabulary("%s: a triplet must be three names, got %r" % (source, triplet))
    return content


def _fmt(value):
    return FLOAT_FORMAT % value


def _csv_writer(fd_):
    return csv.writer(fd_, lineterminator='\n')


def _iter_rows(path, required, optional=()):
    """Yield (line number, row dict) for every data row of a CSV file."""
    with open(path, 'r', encoding='utf-8', newline='') as fd_:
        reader = csv.reader(fd_)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(path, 1, "missing header row")
        missing = [col for col in required if col not in header]
        if missing:
            raise MalformedRow(path, 1, "header lacks column(s) %s" % ", ".join(missing))
        unknown = [col for col in header if col not in required and col not in optional]
        if unknown:
            raise MalformedRow(path, 1, "unexpected column(s) %s" % ", ".join(unknown))
        for fields in reader:
            if not fields:
                continue
            if len(fields) != len(header):
                raise MalformedRow(path, reader.line_num,
                                   "expected %d fields, got %d" % (len(header), len(fields)))
            yield reader.line_num, dict(zip(header, fields))


def _float(row, column, path, line):
    try:
        return float(row[column])
    except ValueError:
        raise MalformedRow(path, line, "%s is not a number: %r" % (column, row[column]))


def _box(row, suffix, path, line):
    return BoundingBox(_float(row, 'XMin' + suffix, path, line), _float(row, 'YMin' + suffix, path, line),
                       _float(row, 'XMax' + suffix, path, line), _float(row, 'YMax' + suffix, path, line))


def _probability(row, column, path, line):
    value = _float(row, column, path, line)
    if not 0.0 <= value <= 1.0:
        raise MalformedRow(path, line, "%s outside [0, 1]: %r" % (column, value))
    return value


def _box_fields(box):
    return [_fmt(box.x_min), _fmt(box.x_max), _fmt(box.y_min), _fmt(box.y_max)]


def read_class_list(path):
    """Read a newline separated list of class names.

    Blank lines and lines starting with ``#`` are skipped.
    """
    with open(path, 'r', encoding='utf-8') as fd_:
        names = [line.strip() for line in fd_]
    return ClassVocabulary([name for name in names if name and not name.startswith('#')])


def read_vocabulary(path, attribute_predicate=None):
    """Read a YAML vocabulary file.

    The file holds the lists ``classes``, ``attributes``, ``predicates`` and
    ``triplets``, the latter as ``[subject, predicate, object]`` names.
    Returns the class vocabulary and the triplet vocabulary.
    """
    if attribute_predicate is None:
        attribute_predicate = get_config()['attribute_predicate']
    with open(path, 'r', encoding='utf-8') as fd_:
        content = load_vocabulary_yaml(fd_, source=path)
    classes = ClassVocabulary.from_names(content.get('classes') or [], content.get('attributes') or [])
    predicates = ClassVocabulary(content.get('predicates') or [])
    triplets = [(classes.class_id(s), predicates.class_id(p), classes.class_id(o))
                for s, p, o in content.get('triplets') or []]
    LOG.debug("Read vocabulary with %d classes, %d predicates and %d triplets from %s",
              len(classes), len(predicates), len(triplets), path)
    return classes, TripletVocabulary(classes, predicates, triplets, attribute_predicate)


def write_vocabulary(path, triplet_vocab):
    """Write a YAML vocabulary file readable by :func:`read_vocabulary`."""
    classes = triplet_vocab.classes
    content = {
        'classes': [classes.name(idx) for idx in classes.object_ids()],
        'attributes': [classes.name(idx) for idx in classes.attribute_ids()],
        'predicates': list(triplet_vocab.predicates_vocabulary.names),
        'triplets': [[classes.name(s), triplet_vocab.predicate_name(p), classes.name(o)]
                     for s, p, o in triplet_vocab],
    }
    with open(path, 'w', encoding='utf-8', newline='\n') as fd_:
        yaml.safe_dump(content, fd_, sort_keys=False, default_flow_style=None)


def read_detections(path, vocabulary):
    """Read a detection CSV file into a list of detections.

    Ground-truth files may leave out the ``Score`` column, in which case the
    confidence is 1.0.
    """
    detections = []
    for line, row in _iter_rows(path, DETECTION_COLUMNS, optional=(SCORE_COLUMN,)):
        class_id = vocabulary.class_id(row['LabelName'])
        box = _box(row, '', path, line).validate()
        confidence = _probability(row, SCORE_COLUMN, path, line) if SCORE_COLUMN in row else 1.0
        detections.append(Detection(row['ImageID'], class_id, box, confidence))
    LOG.debug("Read %d detections from %s", len(detections), path)
    return detections


def write_detections(path, detections, vocabulary, ground_truth=False):
    """Write detections in the layout :func:`read_detections` expects."""
    with open(path, 'w', encoding='utf-8', newline='') as fd_:
        writer = _csv_writer(fd_)
        writer.writerow(DETECTION_COLUMNS if ground_truth else DETECTION_COLUMNS + [SCORE_COLUMN])
        for det in detections:
            fields = [det.image_id, vocabulary.name(det.class_id)] + _box_fields(det.box)
            if not ground_truth:
                fields.append(_fmt(det.confidence))
            writer.writerow(fields)


class AnnotationSet(object):
    """Ground-truth boxes and relations, grouped per image."""

    def __init__(self, boxes, relations, vocabulary, triplet_vocab, duplicate_count=0):
        """Initialize the class instance.

        *boxes* maps image ids to ground-truth detections and *relations* maps
        image ids to relation instances. Both are stored sorted by image id.
        """
        self.vocabulary = vocabulary
        self.triplet_vocab = triplet_vocab
        self.duplicate_count = duplicate_count
        image_ids = sorted(set(boxes) | set(relations))
        self.boxes = {img: tuple(boxes.get(img, ())) for img in image_ids}
        self.relations = {img: tuple(relations.get(img, ())) for img in image_ids}
        self.image_counts = self._count_images()

    def _count_images(self):
        counts = np.zeros(len(self.vocabulary), dtype=np.int64)
        for dets in self.boxes.values():
            for class_id in {det.class_id for det in dets}:
                counts[class_id] += 1
        return counts

    def __len__(self):
        return len(self.boxes)

    def __repr__(self):
        return "AnnotationSet(%d images, %d relations)" % (len(self), self.num_relations)

    @property
    def num_relations(self):
        return sum(len(rels) for rels in self.relations.values())

    def image_ids(self):
        return list(self.boxes)

    def images_with_class(self, class_id):
        """Sorted ids of the images holding at least one box of *class_id*."""
        return [img for img, dets in self.boxes.items() if any(det.class_id == class_id for det in dets)]

    def all_relations(self):
        for img in self.relations:
            for rel in self.relations[img]:
                yield rel

    def subset(self, image_ids):
        """Annotation set restricted to *image_ids*; repeated ids count once.

        The duplicate count of the whole file is carried over.
        """
        keep = set(image_ids)
        return AnnotationSet({img: dets for img, dets in self.boxes.items() if img in keep},
                             {img: rels for img, rels in self.relations.items() if img in keep},
                             self.vocabulary, self.triplet_vocab, duplicate_count=self.duplicate_count)


def _relation_from_row(row, path, line, triplet_vocab):
    classes = triplet_vocab.classes
    try:
        predicate_id = triplet_vocab.predicate_id(row['RelationshipLabel'])
        subject_class = classes.class_id(row['LabelName1'])
        object_class = classes.class_id(row['LabelName2'])
    except UnknownClassName as err:
        raise UnknownTriplet("%s:%d: %s" % (path, line, err))
    is_attribute = predicate_id == triplet_vocab.attribute_predicate_id
    if is_attribute != classes.is_attribute(object_class):
        raise UnknownTriplet("%s:%d: %r must pair with %s" % (
            path, line, row['RelationshipLabel'], "an attribute" if is_attribute else "an object class"))
    if (subject_class, predicate_id, object_class) not in triplet_vocab:
        raise UnknownTriplet("%s:%d: (%s, %s, %s) is not a valid triplet" % (
            path, line, row['LabelName1'], row['RelationshipLabel'], row['LabelName2']))
    image_id = row['ImageID']
    subject = Detection(image_id, subject_class, _box(row, '1', path, line).validate())
    object_box = _box(row, '2', path, line)
    if is_attribute:
        # the empty box, or the subject box repeated as in the Open Images files
        if object_box not in (EMPTY_BOX, subject.box):
            raise MalformedRow(path, line, "attribute %r carries a box of its own: %s" % (
                row['LabelName2'], list(object_box)))
        obj = Detection(image_id, object_class, EMPTY_BOX)
    else:
        obj = Detection(image_id, object_class, object_box.validate())
    return RelationInstance(image_id, subject, obj, predicate_id)


def _add_box(boxes, seen, det):
    key = (det.image_id, det.class_id, tuple(det.box))
    if key not in seen:
        seen.add(key)
        boxes.setdefault(det.image_id, []).append(det)


def read_relations(path, vocabulary, triplet_vocab, boxes_path=None):
    """Read a ground-truth relation CSV into an :class:`AnnotationSet`.

    Exact duplicate rows are dropped and counted. The per-class image counts
    are computed from the distinct boxes named by the relations, together
    with the boxes of *boxes_path* when given.
    """
    relations = {}
    boxes = {}
    seen_boxes = set()
    seen_relations = set()
    duplicates = 0
    for line, row in _iter_rows(path, RELATION_COLUMNS):
        rel = _relation_from_row(row, path, line, triplet_vocab)
        if rel in seen_relations:
            duplicates += 1
            continue
        seen_relations.add(rel)
        relations.setdefault(rel.image_id, []).append(rel)
        _add_box(boxes, seen_boxes, rel.subject)
        if not vocabulary.is_attribute(rel.object.class_id):
            _add_box(boxes, seen_boxes, rel.object)
    if boxes_path is not None:
        for det in read_detections(boxes_path, vocabulary):
            _add_box(boxes, seen_boxes, det._replace(confidence=1.0))
    if duplicates:
        LOG.info("Removed %d duplicate ground-truth triplets from %s", duplicates, path)
    annotations = AnnotationSet(boxes, relations, vocabulary, triplet_vocab, duplicate_count=duplicates)
    LOG.debug("Read %r from %s", annotations, path)
    return annotations


def _relation_fields(rel, triplet_vocab):
    classes = triplet_vocab.classes
    return ([rel.image_id, classes.name(rel.subject.class_id)] + _box_fields(rel.subject.box) +
            [classes.name(rel.object.class_id)] + _box_fields(rel.object.box) +
            [triplet_vocab.predicate_name(rel.predicate_id)])


def write_relations(path, annotations):
    """Write the ground-truth relations of an annotation set."""
    with open(path, 'w', encoding='utf-8', newline='') as fd_:
        writer = _csv_writer(fd_)
        writer.writerow(RELATION_COLUMNS)
        for rel in annotations.all_relations():
            writer.writerow(_relation_fields(rel, annotations.triplet_vocab))


def write_relation_predictions(path, instances, triplet_vocab):
    """Write scored relation instances, one row per instance."""
    with open(path, 'w', encoding='utf-8', newline='') as fd_:
        writer = _csv_writer(fd_)
        writer.writerow(PREDICTION_COLUMNS)
        for rel in instances:
            rel.validate()
            writer.writerow(_relation_fields(rel, triplet_vocab) +
                            [_fmt(rel.subject.confidence), _fmt(rel.object.confidence), _fmt(rel.score)])
    LOG.debug("Wrote relation predictions to %s", path)


def read_relation_predictions(path, triplet_vocab):
    """Read a file written by :func:`write_relation_predictions`."""
    instances = []
    for line, row in _iter_rows(path, PREDICTION_COLUMNS):
        rel = _relation_from_row(row, path, line, triplet_vocab)
        subject = rel.subject._replace(confidence=_probability(row, 'Confidence1', path, line))
        obj = rel.object._replace(confidence=_probability(row, 'Confidence2', path, line))
        instances.append(rel._replace(subject=subject, object=obj,
                                      score=_probability(row, 'Score', path, line)))
    return instances


def box_key(box):
    """Key of a box in a score table: the four coordinates rounded to six decimals.

    >>> box_key(BoundingBox(0.1, 0.2, 0.30000000001, 1.0))
    '0.100000/0.200000/0.300000/1.000000'
    """
    return '/'.join('%.*f' % (BOX_KEY_DECIMALS, value) for value in box)


def _normalize_key(key, path, line):
    try:
        values = [float(value) for value in key.split('/')]
    except ValueError:
        values = []
    if len(values) != 4:
        raise MalformedRow(path, line, "bad box key %r" % (key,))
    return box_key(values)


class ScoreTable(object):
    """Externally produced per-pair, per-predicate scores (e.g. from a visual model)."""

    def __init__(self, scores=None):
        """Initialize the class instance.

        *scores* maps ``(image_id, subject key, object key, predicate_id)`` to a
        probability.
        """
        self._scores = {}
        for key, score in (scores or {}).items():
            self.add(key[0], key[1], key[2], key[3], score)

    def add(self, image_id, subject_key, object_key, predicate_id, score):
        if not 0.0 <= score <= 1.0:
            raise ValueError("Score %r outside [0, 1]" % (score,))
        key = (image_id, subject_key, object_key, int(predicate_id))
        if key in self._scores:
            raise DuplicateKey("Duplicate score table key %s" % (key,))
        self._scores[key] = float(score)

    def __len__(self):
        return len(self._scores)

    def __contains__(self, key):
        return key in self._scores

    def __eq__(self, other):
        return isinstance(other, ScoreTable) and self._scores == other._scores

    def items(self):
        return sorted(self._scores.items())

    @staticmethod
    def key_for(instance):
        return (instance.image_id, box_key(instance.subject.box), box_key(instance.object.box),
                instance.predicate_id)

    def lookup(self, instance, default=None):
        """Score of a relation instance, *default* when the table has none."""
        return self._scores.get(self.key_for(instance), default)


def read_score_table(path):
    """Read a score table CSV (``ImageID,SubjKey,ObjKey,Predicate,Score``)."""
    table = ScoreTable()
    for line, row in _iter_rows(path, SCORE_TABLE_COLUMNS):
        try:
            predicate_id = int(row['Predicate'])
        except ValueError:
            raise MalformedRow(path, line, "Predicate is not an integer id: %r" % (row['Predicate'],))
        score = _probability(row, 'Score', path, line)
        subject_key = _normalize_key(row['SubjKey'], path, line)
        object_key = _normalize_key(row['ObjKey'], path, line)
        try:
            table.add(row['ImageID'], subject_key, object_key, predicate_id, score)
        except DuplicateKey:
            raise DuplicateKey("%s:%d: duplicate key (%s, %s, %s, %d)" % (
                path, line, row['ImageID'], subject_key, object_key, predicate_id))
    LOG.debug("Read %d visual scores from %s", len(table), os.path.basename(path))
    return table


def write_score_table(path, table):
    """Write a score table in the layout :func:`read_score_table` expects."""
    with open(path, 'w', encoding='utf-8', newline='') as fd_:
        writer = _csv_writer(fd_)
        writer.writerow(SCORE_TABLE_COLUMNS)
        for (image_id, subject_key, object_key, predicate_id), score in table.items():
            writer.writerow([image_id, subject_key, object_key, predicate_id, _fmt(score)])
