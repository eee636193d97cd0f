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

"""Class-balanced image sampling.

Classes are drawn with probability proportional to their image count
truncated at a cap N, ``p(k) = min(n_k, N) / sum_i min(n_i, N)``, and an
image is then drawn uniformly among the images holding the drawn class. An
infinite cap gives back the original class distribution.

    >>> class_probabilities([5000, 2000, 500], SamplerConfig(cap=1000)).probabilities
    array([0.4, 0.4, 0.2])

When images hold several classes the realized class frequencies only
approximate ``p``; the two-stage draw is exact for disjoint image sets.
"""

import logging
import math

import numpy as np

from pyvrd.config import get_config
from pyvrd.core import PyvrdError

LOG = logging.getLogger(__name__)

RNG_ALGORITHM = 'PCG64'


class AllClassesEmpty(PyvrdError, ValueError):
    """No class has any image, so no distribution can be formed."""


class SamplerConfig(object):
    """Cap and seed of the class-balanced sampler."""

    def __init__(self, cap=3000, seed=0):
        """Initialize the class instance."""
        cap = float(cap) if cap is not None else math.inf
        if not math.isinf(cap):
            if cap < 1 or cap != int(cap):
                raise ValueError("Sampler cap must be a positive integer or infinite, got %r" % (cap,))
            cap = int(cap)
        self.cap = cap
        self.seed = int(seed)

    @classmethod
    def from_config(cls, **overrides):
        section = dict(get_config()['sampler'])
        section.update({key: val for key, val in overrides.items() if val is not None})
        return cls(**section)

    def __repr__(self):
        return "SamplerConfig(cap=%r, seed=%r)" % (self.cap, self.seed)


class ClassDistribution(object):
    """A probability vector over the classes."""

    def __init__(self, probabilities):
        """Initialize the class instance."""
        probabilities = np.asarray(probabilities, dtype=np.float64)
        if np.any(probabilities < 0) or abs(probabilities.sum() - 1.0) > 1e-12:
            raise ValueError("Class probabilities must be non-negative and sum to 1")
        self.probabilities = probabilities

    def __len__(self):
        return len(self.probabilities)

    def __getitem__(self, class_id):
        return self.probabilities[class_id]


def capped_counts(counts, cap):
    """Image counts truncated at the cap."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("Image counts must be non-negative")
    return np.minimum(counts, cap)


def class_probabilities(counts, config):
    """Sampling probability of every class given its image count and the cap.

    >>> class_probabilities([3, 1], SamplerConfig(cap=float('inf'))).probabilities
    array([0.75, 0.25])
    """
    capped = capped_counts(counts, config.cap)
    total = capped.sum()
    if total <= 0:
        raise AllClassesEmpty("No class has any image to sample from")
    return ClassDistribution(capped / total)


def flattening_curve(counts, caps):
    """Class probabilities sorted in decreasing order, one row per cap.

    Smaller caps give flatter rows; an infinite cap gives the original
    distribution.
    """
    rows = []
    for cap in caps:
        probs = class_probabilities(counts, SamplerConfig(cap=cap)).probabilities
        rows.append(np.sort(probs)[::-1])
    return np.vstack(rows) if rows else np.zeros((0, len(counts)))


class ClassBalancedSampler(object):
    """Draws image ids class-first, then image-uniformly, from a seeded PCG64 stream.

    An instance owns its generator: use one instance per thread.
    """

    def __init__(self, annotations, config=None):
        """Initialize the class instance."""
        self.config = config or SamplerConfig.from_config()
        self.distribution = class_probabilities(annotations.image_counts, self.config)
        self._images = [annotations.images_with_class(k) for k in range(len(self.distribution))]
        self._rng = np.random.Generator(np.random.PCG64(self.config.seed))

    def sample(self, count):
        """Draw *count* image ids."""
        if count < 1:
            raise ValueError("Sample count must be at least 1, got %r" % (count,))
        classes = self._rng.choice(len(self.distribution), size=count, p=self.distribution.probabilities)
        picks = []
        for class_id in classes:
            images = self._images[class_id]
            picks.append(images[self._rng.integers(len(images))])
        LOG.debug("Sampled %d images over %d classes", count, len(np.unique(classes)))
        return picks

    def metadata(self):
        """The JSON sidecar content describing the draw."""
        cap = self.config.cap
        return {'cap': 'inf' if math.isinf(cap) else cap,
                'seed': self.config.seed,
                'rng': RNG_ALGORITHM,
                'probabilities': [float(p) for p in self.distribution.probabilities]}


def sample_images(annotations, config, count):
    """Draw *count* image ids i.i.d. from the class-balanced distribution."""
    return ClassBalancedSampler(annotations, config).sample(count)
