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

"""Synthetic annotated corpus with relations planted by geometric rules.

Every ordered pair of objects in an image is annotated with the predicates
whose rule holds for the two boxes, so a spatial model can learn the
relations exactly. The corpus backs the ``demo`` command and the tests.
"""

import logging

import numpy as np

from pyvrd.core import EMPTY_BOX, BoundingBox, ClassVocabulary, Detection, RelationInstance, TripletVocabulary, iou
from pyvrd.features import generate_candidates, label_candidates
from pyvrd.ingest import AnnotationSet, ScoreTable, box_key

LOG = logging.getLogger(__name__)

OBJECT_CLASSES = ('person', 'table', 'cup', 'lamp', 'bag')
ATTRIBUTE_CLASSES = ('wooden', 'red')
PREDICATES = ('above', 'inside_of', 'next_to', 'is')
ATTRIBUTES_OF = {'table': ('wooden',), 'cup': ('red',), 'bag': ('red',)}

COORD_DECIMALS = 4
INFORMATIVE_AREA = 0.04


def make_vocabulary():
    """Class and triplet vocabularies of the synthetic corpus."""
    classes = ClassVocabulary.from_names(OBJECT_CLASSES, ATTRIBUTE_CLASSES)
    predicates = ClassVocabulary(PREDICATES)
    objects = classes.object_ids()
    triplets = []
    for name in PREDICATES[:-1]:
        pid = predicates.class_id(name)
        triplets.extend((s, pid, o) for s in objects for o in objects)
    is_id = predicates.class_id('is')
    for object_name, attributes in ATTRIBUTES_OF.items():
        for attribute in attributes:
            triplets.append((classes.class_id(object_name), is_id, classes.class_id(attribute)))
    return classes, TripletVocabulary(classes, predicates, triplets, attribute_predicate='is')


def is_above(subject_box, object_box):
    (scx, scy), (ocx, ocy) = subject_box.center, object_box.center
    return ocy - scy > 0.05 and abs(ocx - scx) < 0.2


def is_inside(subject_box, object_box):
    return (subject_box != object_box and
            object_box.x_min <= subject_box.x_min and subject_box.x_max <= object_box.x_max and
            object_box.y_min <= subject_box.y_min and subject_box.y_max <= object_box.y_max)


def is_next_to(subject_box, object_box):
    (scx, scy), (ocx, ocy) = subject_box.center, object_box.center
    return abs(ocy - scy) < 0.1 and abs(ocx - scx) < 0.35 and iou(subject_box, object_box) == 0.0


RULES = {'above': is_above, 'inside_of': is_inside, 'next_to': is_next_to}


def planted_predicates(subject_box, object_box):
    """Names of the predicates whose rule holds for a (subject, object) box pair.

    >>> planted_predicates(BoundingBox(0.4, 0.1, 0.6, 0.2), BoundingBox(0.35, 0.5, 0.65, 0.7))
    ['above']
    """
    return [name for name in PREDICATES[:-1] if RULES[name](subject_box, object_box)]


def _rounded_box(x_min, y_min, width, height):
    x_min = min(max(x_min, 0.0), 1.0 - width)
    y_min = min(max(y_min, 0.0), 1.0 - height)
    values = np.round([x_min, y_min, x_min + width, y_min + height], COORD_DECIMALS)
    values = np.clip(values, 0.0, 1.0)
    return BoundingBox(*[float(value) for value in values]).validate()


def _random_box(rng):
    width, height = rng.uniform(0.08, 0.35, size=2)
    return _rounded_box(rng.uniform(0.0, 1.0 - width), rng.uniform(0.0, 1.0 - height), width, height)


def _inner_box(rng, parent):
    width = parent.width * rng.uniform(0.3, 0.7)
    height = parent.height * rng.uniform(0.3, 0.7)
    return _rounded_box(parent.x_min + rng.uniform(0.0, parent.width - width),
                        parent.y_min + rng.uniform(0.0, parent.height - height), width, height)


def _neighbour_box(rng, anchor):
    width, height = rng.uniform(0.08, 0.25, size=2)
    (acx, acy) = anchor.center
    if rng.random() < 0.5:
        # stacked on top of the anchor
        cx = acx + rng.uniform(-0.15, 0.15)
        cy = anchor.y_min - height / 2.0 - rng.uniform(0.0, 0.1)
    else:
        side = 1.0 if rng.random() < 0.5 else -1.0
        cx = acx + side * (anchor.width / 2.0 + width / 2.0 + rng.uniform(0.005, 0.08))
        cy = acy + rng.uniform(-0.08, 0.08)
    return _rounded_box(cx - width / 2.0, cy - height / 2.0, width, height)


def _image_boxes(rng, image_id, num_objects):
    boxes = []
    for _ in range(num_objects):
        class_id = int(rng.integers(len(OBJECT_CLASSES)))
        draw = rng.random()
        if boxes and draw < 0.25:
            parent = boxes[int(rng.integers(len(boxes)))].box
            if parent.width > 0.1 and parent.height > 0.1:
                box = _inner_box(rng, parent)
            else:
                box = _random_box(rng)
        elif boxes and draw < 0.55:
            box = _neighbour_box(rng, boxes[int(rng.integers(len(boxes)))].box)
        else:
            box = _random_box(rng)
        if any(det.box == box for det in boxes):
            continue
        boxes.append(Detection(image_id, class_id, box))
    return boxes


def _image_relations(rng, boxes, classes, triplet_vocab):
    relations = []
    for subject in boxes:
        for obj in boxes:
            if subject is obj:
                continue
            for name in planted_predicates(subject.box, obj.box):
                pid = triplet_vocab.predicate_id(name)
                relations.append(RelationInstance(subject.image_id, subject, obj, pid))
    is_id = triplet_vocab.predicate_id('is')
    for det in boxes:
        for attribute in ATTRIBUTES_OF.get(classes.name(det.class_id), ()):
            if rng.random() < 0.5:
                attr = Detection(det.image_id, classes.class_id(attribute), EMPTY_BOX)
                relations.append(RelationInstance(det.image_id, det, attr, is_id))
    return relations


def generate_corpus(num_images, seed=0, min_objects=3, max_objects=6):
    """Annotation set of *num_images* synthetic images.

    Each image holds between *min_objects* and *max_objects* boxes; some are
    placed inside or next to an earlier box so that every rule fires often.
    """
    if num_images < 1:
        raise ValueError("Need at least one image, got %d" % num_images)
    classes, triplet_vocab = make_vocabulary()
    rng = np.random.Generator(np.random.PCG64(seed))
    boxes, relations = {}, {}
    for idx in range(num_images):
        image_id = 'img%05d' % idx
        dets = _image_boxes(rng, image_id, int(rng.integers(min_objects, max_objects + 1)))
        boxes[image_id] = dets
        relations[image_id] = _image_relations(rng, dets, classes, triplet_vocab)
    corpus = AnnotationSet(boxes, relations, classes, triplet_vocab)
    LOG.info("Generated synthetic %r", corpus)
    return corpus


def synthetic_visual_scores(annotations, seed=0, image_ids=None):
    """Score table standing in for a visual model.

    Over the candidate pairs of the ground-truth boxes, pairs whose subject is
    small get a score that separates positives from negatives, all other
    pairs get uniform noise. Only relation predicates are scored.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    triplet_vocab = annotations.triplet_vocab
    image_ids = annotations.image_ids() if image_ids is None else sorted(set(image_ids))
    table = ScoreTable()
    for predicate_id in triplet_vocab.relation_predicates():
        for image_id in image_ids:
            candidates = generate_candidates(annotations.boxes.get(image_id, ()), predicate_id, triplet_vocab)
            for (subject, obj), label in label_candidates(candidates, annotations.relations.get(image_id, ()),
                                                           predicate_id):
                if subject.box.area < INFORMATIVE_AREA:
                    score = rng.uniform(0.7, 1.0) if label else rng.uniform(0.0, 0.3)
                else:
                    score = rng.uniform(0.0, 1.0)
                table.add(image_id, box_key(subject.box), box_key(obj.box), predicate_id, float(score))
    LOG.debug("Drew %d synthetic visual scores", len(table))
    return table
