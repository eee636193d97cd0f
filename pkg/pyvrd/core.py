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

"""Domain types and box geometry shared by the whole package.

Boxes are normalized to the image size, so all coordinates lie in [0, 1]::

    >>> a = BoundingBox(0.0, 0.0, 0.2, 0.2)
    >>> b = BoundingBox(0.1, 0.1, 0.3, 0.3)
    >>> round(iou(a, b), 6)
    0.142857
    >>> union_box(a, b)
    BoundingBox(x_min=0.0, y_min=0.0, x_max=0.3, y_max=0.3)

"""

import logging
import math
from typing import NamedTuple

import numpy as np

LOG = logging.getLogger(__name__)


class PyvrdError(Exception):
    """Base class of every error raised on purpose by pyvrd."""


class BoxInvariantViolation(PyvrdError, ValueError):
    """A box lies outside the unit square or has its corners swapped."""


class UnknownClassName(PyvrdError, KeyError):
    """A class, attribute or predicate name is not in the vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else ''


class BoundingBox(NamedTuple):
    """Axis-aligned box in normalized image coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def validate(self):
        """Raise BoxInvariantViolation unless 0 <= min <= max <= 1 on both axes, return the box otherwise."""
        for value in self:
            if not math.isfinite(value):
                raise BoxInvariantViolation("Non finite box coordinate in %s" % (tuple(self),))
        if not 0.0 <= self.x_min <= self.x_max <= 1.0:
            raise BoxInvariantViolation("Expected 0 <= x_min <= x_max <= 1, got x_min=%r x_max=%r"
                                        % (self.x_min, self.x_max))
        if not 0.0 <= self.y_min <= self.y_max <= 1.0:
            raise BoxInvariantViolation("Expected 0 <= y_min <= y_max <= 1, got y_min=%r y_max=%r"
                                        % (self.y_min, self.y_max))
        return self

    def as_array(self):
        return np.array(self, dtype=np.float64)


EMPTY_BOX = BoundingBox(0.0, 0.0, 0.0, 0.0)


class Detection(NamedTuple):
    """One detected (or annotated) object."""

    image_id: str
    class_id: int
    box: BoundingBox
    confidence: float = 1.0


class RelationInstance(NamedTuple):
    """A (subject, predicate, object) triplet located in one image."""

    image_id: str
    subject: Detection
    object: Detection
    predicate_id: int
    score: float = 1.0

    def validate(self):
        if not (self.subject.image_id == self.object.image_id == self.image_id):
            raise ValueError("Subject and object of a relation must belong to image %s" % self.image_id)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("Relation score %r outside [0, 1]" % (self.score,))
        return self


def intersection_area(a, b):
    """Area of the overlap of two boxes, 0 when they do not overlap."""
    width = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    height = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if width <= 0 or height <= 0:
        return 0.0
    return width * height


def iou(a, b):
    """Intersection over union of two boxes.

    A zero union (two degenerate boxes) gives 0.

    >>> iou(BoundingBox(0, 0, 0.5, 0.5), BoundingBox(0, 0, 0.5, 0.5))
    1.0
    >>> iou(BoundingBox(0, 0, 0.1, 0.1), BoundingBox(0.5, 0.5, 0.6, 0.6))
    0.0
    """
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def center_distance(a, b):
    """Euclidean distance between the centers of two boxes.

    >>> round(center_distance(BoundingBox(0, 0, 0.5, 0.5), BoundingBox(0.5, 0.5, 1, 1)), 5)
    0.70711
    """
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def union_box(a, b):
    """Smallest box containing both *a* and *b*."""
    return BoundingBox(min(a.x_min, b.x_min), min(a.y_min, b.y_min),
                       max(a.x_max, b.x_max), max(a.y_max, b.y_max))


def box_array(boxes):
    """Stack boxes into an (n, 4) float64 array of x_min, y_min, x_max, y_max."""
    boxes = list(boxes)
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array(boxes, dtype=np.float64).reshape(len(boxes), 4)


def intersection_areas(a, b):
    """Broadcasting version of :func:`intersection_area` over arrays whose last axis holds the corners."""
    width = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    height = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    return np.where((width > 0) & (height > 0), width * height, 0.0)


def _broadcast_iou(a, b):
    # operation order must match iou()
    inter = intersection_areas(a, b)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def paired_iou(boxes_a, boxes_b):
    """Row-wise IoU of two (n, 4) box arrays."""
    return _broadcast_iou(np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4),
                          np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4))


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU between two (n, 4) and (m, 4) box arrays.

    Entries are bit-identical to the scalar :func:`iou`.
    """
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    return _broadcast_iou(boxes_a[:, None, :], boxes_b[None, :, :])


class ClassVocabulary(object):
    """Ordered, dense mapping between class ids and class names.

    Classes flagged as attributes (``wooden``, ``plastic``...) share the id
    space with object classes so that an attribute can sit in the object slot
    of an "is" relation.
    """

    def __init__(self, names, attributes=None):
        """Initialize the class instance."""
        self._names = tuple(str(name) for name in names)
        if len(set(self._names)) != len(self._names):
            raise ValueError("Class names must be unique")
        if attributes is None:
            attributes = [False] * len(self._names)
        self._attributes = tuple(bool(flag) for flag in attributes)
        if len(self._attributes) != len(self._names):
            raise ValueError("Need one attribute flag per class")
        self._index = {name: idx for idx, name in enumerate(self._names)}

    @classmethod
    def from_names(cls, names, attribute_names=()):
        """Build a vocabulary of object classes followed by attribute classes."""
        names = list(names)
        attribute_names = list(attribute_names)
        return cls(names + attribute_names, [False] * len(names) + [True] * len(attribute_names))

    def __len__(self):
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __eq__(self, other):
        return (isinstance(other, ClassVocabulary) and self._names == other._names and
                self._attributes == other._attributes)

    def __hash__(self):
        return hash((self._names, self._attributes))

    def __repr__(self):
        return "ClassVocabulary(%d classes, %d attributes)" % (len(self), sum(self._attributes))

    @property
    def names(self):
        return self._names

    def class_id(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise UnknownClassName("Unknown class name: %r" % (name,))

    def name(self, class_id):
        return self._names[class_id]

    def is_attribute(self, class_id):
        return self._attributes[class_id]

    def attribute_ids(self):
        return [idx for idx, flag in enumerate(self._attributes) if flag]

    def object_ids(self):
        return [idx for idx, flag in enumerate(self._attributes) if not flag]


class TripletVocabulary(object):
    """The set of (subject class, predicate, object class) combinations that may occur."""

    def __init__(self, classes, predicates, triplets, attribute_predicate='is'):
        """Initialize the class instance.

        *predicates* is a :class:`ClassVocabulary` of predicate names and
        *triplets* an iterable of integer id triples.
        """
        self.classes = classes
        self.predicates_vocabulary = predicates
        clean = set()
        for subject_id, predicate_id, object_id in triplets:
            for class_id in (subject_id, object_id):
                if not 0 <= class_id < len(classes):
                    raise UnknownClassName("Class id %d not in vocabulary" % class_id)
            if not 0 <= predicate_id < len(predicates):
                raise UnknownClassName("Predicate id %d not in vocabulary" % predicate_id)
            clean.add((int(subject_id), int(predicate_id), int(object_id)))
        self._triplets = frozenset(clean)
        self.attribute_predicate = attribute_predicate
        self._pairs = {}
        for subject_id, predicate_id, object_id in sorted(self._triplets):
            self._pairs.setdefault(predicate_id, []).append((subject_id, object_id))

    def __contains__(self, triplet):
        return tuple(triplet) in self._triplets

    def __len__(self):
        return len(self._triplets)

    def __iter__(self):
        return iter(sorted(self._triplets))

    @property
    def num_predicates(self):
        return len(self.predicates_vocabulary)

    @property
    def attribute_predicate_id(self):
        """Id of the attribute predicate, None when the vocabulary has none."""
        if self.attribute_predicate in self.predicates_vocabulary.names:
            return self.predicates_vocabulary.class_id(self.attribute_predicate)
        return None

    def predicate_id(self, name):
        return self.predicates_vocabulary.class_id(name)

    def predicate_name(self, predicate_id):
        return self.predicates_vocabulary.name(predicate_id)

    def pairs_for(self, predicate_id):
        """Sorted (subject class, object class) pairs licensed for a predicate."""
        return list(self._pairs.get(predicate_id, []))

    def predicates(self):
        """Sorted ids of the predicates with at least one triplet."""
        return sorted(self._pairs)

    def relation_predicates(self):
        """Predicates that link two objects, i.e. all but the attribute predicate."""
        attr = self.attribute_predicate_id
        return [pid for pid in self.predicates() if pid != attr]

    def attribute_pairs(self, predicate_id=None):
        """(object class, attribute class) pairs licensed for the attribute predicate."""
        if predicate_id is None:
            predicate_id = self.attribute_predicate_id
        if predicate_id is None:
            return []
        return [(s, o) for s, o in self.pairs_for(predicate_id) if self.classes.is_attribute(o)]
