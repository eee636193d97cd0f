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

"""Gradient boosted decision trees for binary classification.

Trees are grown on the second order expansion of the logistic loss. With
``g = p - y`` and ``h = p (1 - p)`` summed over the rows of a node, a split
into left and right children gains::

    0.5 * (G_L**2 / (H_L + lambda) + G_R**2 / (H_R + lambda) - G**2 / (H + lambda)) - gamma

and is only made when that gain is positive. A leaf predicts
``-G / (H + lambda)`` times the learning rate. Splits are searched
exhaustively over the sorted values of every sampled feature.

Two boosters are available. ``gbtree`` adds one tree per round. ``dart``
first drops each existing tree with probability ``dart_drop_rate``, fits the
new tree against the remaining ensemble, then scales the new tree by
``1 / (k + 1)`` and the ``k`` dropped trees by ``k / (k + 1)``.

Model files start with ``b'GBM1'``, followed by the little endian uint32
length of a UTF-8 JSON header and by the nodes of every tree, in tree order,
as packed records of (int32 feature, float32 threshold, int32 left,
int32 right, float32 value). Leaves have feature, left and right set to -1.
"""

import json
import logging
import math
import struct

import numpy as np
from scipy.special import expit

from pyvrd.config import get_config
from pyvrd.core import PyvrdError
from pyvrd.features import layout_fingerprint

LOG = logging.getLogger(__name__)

MAGIC = b'GBM1'
MAGIC_PREFIX = b'GBM'
FORMAT_VERSION = 1
_LENGTH = struct.Struct('<I')
NODE_DTYPE = np.dtype([('feature', '<i4'), ('threshold', '<f4'), ('left', '<i4'), ('right', '<i4'),
                       ('value', '<f4')])
BOOSTERS = ('gbtree', 'dart')
PROB_EPSILON = 1e-6


class SingleClassTraining(PyvrdError, ValueError):
    """The training labels hold a single class."""


class EmptyFeatures(PyvrdError, ValueError):
    """The training matrix has no rows or no columns."""


class FeatureLengthMismatch(PyvrdError, ValueError):
    """A feature vector does not have the length the model was trained on."""


class VersionMismatch(PyvrdError, IOError):
    """The model file was written by an unsupported format version."""


class CorruptModel(PyvrdError, IOError):
    """The model file cannot be decoded."""


class GbmConfig(object):
    """Hyper-parameters of the boosting run."""

    def __init__(self, booster='gbtree', max_depth=6, rounds=100, learning_rate=0.1, subsample=1.0,
                 colsample_bytree=1.0, gamma=0.0, reg_lambda=1.0, early_stopping_interval=50,
                 dart_drop_rate=0.1, seed=0):
        """Initialize the class instance."""
        if booster not in BOOSTERS:
            raise ValueError("booster must be one of %s, got %r" % (", ".join(BOOSTERS), booster))
        if int(max_depth) < 1 or int(rounds) < 1 or int(early_stopping_interval) < 1:
            raise ValueError("max_depth, rounds and early_stopping_interval must be positive")
        if not learning_rate > 0:
            raise ValueError("learning_rate must be positive, got %r" % (learning_rate,))
        for name, value in (('subsample', subsample), ('colsample_bytree', colsample_bytree)):
            if not 0.0 < value <= 1.0:
                raise ValueError("%s must lie in (0, 1], got %r" % (name, value))
        if gamma < 0 or reg_lambda < 0:
            raise ValueError("gamma and lambda must be non-negative")
        if not 0.0 <= dart_drop_rate < 1.0:
            raise ValueError("dart_drop_rate must lie in [0, 1), got %r" % (dart_drop_rate,))
        self.booster = booster
        self.max_depth = int(max_depth)
        self.rounds = int(rounds)
        self.learning_rate = float(learning_rate)
        self.subsample = float(subsample)
        self.colsample_bytree = float(colsample_bytree)
        self.gamma = float(gamma)
        self.reg_lambda = float(reg_lambda)
        self.early_stopping_interval = int(early_stopping_interval)
        self.dart_drop_rate = float(dart_drop_rate)
        self.seed = int(seed)

    @classmethod
    def from_dict(cls, section):
        kwargs = dict(section)
        if 'lambda' in kwargs:
            kwargs['reg_lambda'] = kwargs.pop('lambda')
        return cls(**kwargs)

    @classmethod
    def from_config(cls, section='spatio_semantic', **overrides):
        """Read the ``gbm.<section>`` configuration, then apply *overrides*."""
        values = dict(get_config()['gbm'][section])
        values.update({key: val for key, val in overrides.items() if val is not None})
        return cls.from_dict(values)

    def to_dict(self):
        return {'booster': self.booster, 'max_depth': self.max_depth, 'rounds': self.rounds,
                'learning_rate': self.learning_rate, 'subsample': self.subsample,
                'colsample_bytree': self.colsample_bytree, 'gamma': self.gamma, 'lambda': self.reg_lambda,
                'early_stopping_interval': self.early_stopping_interval,
                'dart_drop_rate': self.dart_drop_rate, 'seed': self.seed}

    def replace(self, **changes):
        values = self.to_dict()
        values.update(changes)
        return GbmConfig.from_dict(values)

    def __repr__(self):
        return "GbmConfig(%s)" % ", ".join("%s=%r" % item for item in sorted(self.to_dict().items()))


class RegressionTree(object):
    """Binary tree stored as parallel node arrays in preorder; node 0 is the root."""

    def __init__(self, nodes):
        """Initialize the class instance."""
        self.nodes = np.asarray(nodes, dtype=NODE_DTYPE)

    @classmethod
    def leaf(cls, value):
        return cls(np.array([(-1, 0.0, -1, -1, value)], dtype=NODE_DTYPE))

    def __len__(self):
        return len(self.nodes)

    @property
    def num_splits(self):
        return int(np.sum(self.nodes['feature'] >= 0))

    @property
    def depth(self):
        depths = np.zeros(len(self.nodes), dtype=np.int64)
        for idx, node in enumerate(self.nodes):
            if node['feature'] >= 0:
                depths[node['left']] = depths[idx] + 1
                depths[node['right']] = depths[idx] + 1
        return int(depths.max()) if len(depths) else 0

    def apply(self, features):
        """Index of the leaf every row of a float32 matrix lands in."""
        feature = self.nodes['feature']
        threshold = self.nodes['threshold']
        left = self.nodes['left']
        right = self.nodes['right']
        rows = np.arange(features.shape[0])
        node = np.zeros(features.shape[0], dtype=np.intp)
        while True:
            inner = feature[node] >= 0
            if not inner.any():
                return node
            column = np.where(inner, feature[node], 0)
            go_left = features[rows, column] <= threshold[node]
            node = np.where(inner, np.where(go_left, left[node], right[node]), node)

    def predict(self, features):
        """Raw (unscaled) tree output of every row."""
        return self.nodes['value'][self.apply(features)]

    def validate(self, num_features):
        count = len(self.nodes)
        if count == 0:
            raise CorruptModel("Tree without nodes")
        inner = self.nodes['feature'] >= 0
        children = np.concatenate([self.nodes['left'][inner], self.nodes['right'][inner]])
        if np.any(self.nodes['feature'] >= num_features) or np.any(children <= 0) or np.any(children >= count):
            raise CorruptModel("Tree node refers outside the tree or the feature vector")
        if not np.all(np.isfinite(self.nodes['value'])):
            raise CorruptModel("Tree holds a non finite leaf value")


class GbmModel(object):
    """A trained ensemble: base log-odds plus scaled tree outputs."""

    def __init__(self, trees, scales, base_score, booster, fingerprint, num_features, config=None,
                 best_iteration=None, evals_result=None):
        """Initialize the class instance."""
        if len(trees) != len(scales):
            raise ValueError("Need one scale per tree")
        self.trees = list(trees)
        self.scales = [float(scale) for scale in scales]
        self.base_score = float(base_score)
        self.booster = booster
        self.fingerprint = fingerprint
        self.num_features = int(num_features)
        self.config = config
        self.best_iteration = best_iteration
        self.evals_result = evals_result or {}

    def __repr__(self):
        return "GbmModel(%s, %d trees, %d features)" % (self.booster, len(self.trees), self.num_features)

    def decision_function(self, features):
        """Log-odds of every row of a feature matrix."""
        features = _as_matrix(features)
        if features.shape[1] != self.num_features:
            raise FeatureLengthMismatch("Model expects %d features, got %d" % (self.num_features, features.shape[1]))
        margin = np.full(features.shape[0], self.base_score, dtype=np.float64)
        for tree, scale in zip(self.trees, self.scales):
            margin += scale * tree.predict(features).astype(np.float64)
        return margin


def _as_matrix(features):
    features = np.asarray(features, dtype=np.float32)
    if features.ndim == 1:
        features = features.reshape(1, -1)
    return features


def logloss(labels, margin):
    """Mean logistic loss of log-odds *margin* against 0/1 *labels*."""
    # log(1 + exp(m)) - y * m
    return float(np.mean(np.logaddexp(0.0, margin) - labels * margin))


def logistic_gradients(labels, margin):
    """Per-row gradient and hessian of the logistic loss with respect to *margin*."""
    prob = expit(margin)
    return prob - labels, prob * (1.0 - prob)


def predict_proba(model, features):
    """Probability of the positive class for every row of a feature matrix."""
    return expit(model.decision_function(features))


def predict(model, vector):
    """Probability of the positive class for one feature vector."""
    vector = np.asarray(vector)
    if vector.ndim != 1 or vector.shape[0] != model.num_features:
        raise FeatureLengthMismatch("Model expects a vector of %d features, got shape %s"
                                    % (model.num_features, vector.shape))
    return float(predict_proba(model, vector)[0])


def _best_split(features, grad, hess, reg_lambda, gamma):
    """Best (column, threshold, gain) of a node, None when no split gains anything.

    Every column is sorted once; cumulative gradient and hessian sums give
    the children statistics of all split positions at once.
    """
    if features.shape[0] < 2:
        return None
    order = np.argsort(features, axis=0, kind='mergesort')
    values = np.take_along_axis(features, order, axis=0)
    grad_left = np.cumsum(grad[order], axis=0)[:-1]
    hess_left = np.cumsum(hess[order], axis=0)[:-1]
    grad_total = grad.sum()
    hess_total = hess.sum()
    grad_right = grad_total - grad_left
    hess_right = hess_total - hess_left
    with np.errstate(divide='ignore', invalid='ignore'):
        gain = 0.5 * (grad_left ** 2 / (hess_left + reg_lambda) + grad_right ** 2 / (hess_right + reg_lambda) -
                      grad_total ** 2 / (hess_total + reg_lambda)) - gamma
    # only between distinct values
    gain = np.where((values[1:] > values[:-1]) & np.isfinite(gain), gain, -np.inf)
    best = int(np.argmax(gain))
    position, column = np.unravel_index(best, gain.shape)
    if not gain[position, column] > 0:
        return None
    return int(column), values[position, column], float(gain[position, column])


class _TreeGrower(object):
    """Grows one tree on fixed gradients, hessians, rows and columns."""

    def __init__(self, features, grad, hess, columns, config):
        """Initialize the class instance."""
        self.features = features
        self.grad = grad
        self.hess = hess
        self.columns = columns
        self.config = config
        self.nodes = []

    def grow(self, rows):
        self._grow(rows, 0)
        return RegressionTree(np.array([tuple(node) for node in self.nodes], dtype=NODE_DTYPE))

    def _leaf_value(self, rows):
        grad = self.grad[rows].sum()
        hess = self.hess[rows].sum()
        denominator = hess + self.config.reg_lambda
        if denominator <= 0:
            return np.float32(0.0)
        return np.float32(-grad / denominator * self.config.learning_rate)

    def _grow(self, rows, depth):
        node = len(self.nodes)
        self.nodes.append([-1, 0.0, -1, -1, 0.0])
        split = None
        if depth < self.config.max_depth:
            split = _best_split(self.features[np.ix_(rows, self.columns)], self.grad[rows], self.hess[rows],
                                self.config.reg_lambda, self.config.gamma)
        if split is None:
            self.nodes[node][4] = self._leaf_value(rows)
            return node
        column, threshold, _gain = split
        feature = int(self.columns[column])
        go_left = self.features[rows, feature] <= threshold
        left = self._grow(rows[go_left], depth + 1)
        right = self._grow(rows[~go_left], depth + 1)
        self.nodes[node] = [feature, threshold, left, right, 0.0]
        return node


def _check_training_data(features, labels, allow_single_class):
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[0] == 0 or features.shape[1] == 0:
        raise EmptyFeatures("Training needs a non-empty 2-D feature matrix, got shape %s" % (features.shape,))
    if not np.all(np.isfinite(features)):
        raise ValueError("Feature matrix holds non finite values")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (features.shape[0],):
        raise ValueError("Need one label per feature row")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("Labels must be 0 or 1")
    if len(np.unique(labels)) < 2 and not allow_single_class:
        raise SingleClassTraining("Training labels are all %d" % int(labels[0]))
    return features, labels


def _sample(rng, total, fraction):
    if fraction >= 1.0:
        return np.arange(total)
    size = max(1, int(round(fraction * total)))
    return np.sort(rng.choice(total, size=size, replace=False))


def train(features, labels, config=None, validation=None, feature_names=None, allow_single_class=False):
    """Boost a binary classifier.

    *validation* is an optional ``(features, labels)`` pair. When given,
    training stops once the validation log-loss has not improved for
    ``early_stopping_interval`` rounds, and the model is rolled back to its
    best round.
    """
    config = config or GbmConfig.from_config()
    features, labels = _check_training_data(features, labels, allow_single_class)
    num_rows, num_features = features.shape
    if feature_names is None:
        feature_names = ['f%d' % idx for idx in range(num_features)]
    if len(feature_names) != num_features:
        raise FeatureLengthMismatch("%d feature names for %d features" % (len(feature_names), num_features))

    prior = min(max(labels.mean(), PROB_EPSILON), 1.0 - PROB_EPSILON)
    base_score = math.log(prior / (1.0 - prior))
    rng = np.random.Generator(np.random.PCG64(config.seed))

    margin = np.full(num_rows, base_score)
    if validation is not None:
        valid_features = _as_matrix(validation[0])
        valid_labels = np.asarray(validation[1], dtype=np.float64)
        valid_margin = np.full(valid_features.shape[0], base_score)
    trees, scales, train_out, valid_out = [], [], [], []
    evals = {'train': [], 'valid': []} if validation is not None else {'train': []}
    best = (np.inf, -1, [])

    for round_ in range(config.rounds):
        dropped = []
        if config.booster == 'dart' and trees and config.dart_drop_rate > 0:
            dropped = list(np.flatnonzero(rng.random(len(trees)) < config.dart_drop_rate))
        fit_margin = margin
        if dropped:
            fit_margin = margin - sum(scales[idx] * train_out[idx] for idx in dropped)

        grad, hess = logistic_gradients(labels, fit_margin)
        rows = _sample(rng, num_rows, config.subsample)
        columns = _sample(rng, num_features, config.colsample_bytree)
        tree = _TreeGrower(features, grad, hess, columns, config).grow(rows)

        num_dropped = len(dropped)
        new_scale = 1.0 / (num_dropped + 1.0)
        for idx in dropped:
            old = scales[idx]
            scales[idx] = old * num_dropped / (num_dropped + 1.0)
            margin += (scales[idx] - old) * train_out[idx]
            if validation is not None:
                valid_margin += (scales[idx] - old) * valid_out[idx]

        trees.append(tree)
        scales.append(new_scale)
        train_out.append(tree.predict(features).astype(np.float64))
        margin += new_scale * train_out[-1]
        evals['train'].append(logloss(labels, margin))
        if validation is None:
            LOG.debug("round %d: train-logloss %.6f", round_, evals['train'][-1])
            continue

        valid_out.append(tree.predict(valid_features).astype(np.float64))
        valid_margin += new_scale * valid_out[-1]
        evals['valid'].append(logloss(valid_labels, valid_margin))
        LOG.debug("round %d: train-logloss %.6f valid-logloss %.6f", round_, evals['train'][-1],
                  evals['valid'][-1])
        if evals['valid'][-1] < best[0]:
            best = (evals['valid'][-1], round_, list(scales))
        elif round_ - best[1] >= config.early_stopping_interval:
            LOG.info("Early stopping at round %d, best round %d with valid-logloss %.6f",
                     round_, best[1], best[0])
            break

    best_iteration = None
    if validation is not None:
        best_iteration = best[1]
        trees = trees[:best_iteration + 1]
        scales = best[2]
    return GbmModel(trees, scales, base_score, config.booster, layout_fingerprint(feature_names), num_features,
                    config=config.to_dict(), best_iteration=best_iteration, evals_result=evals)


def _header(model):
    return {'version': FORMAT_VERSION,
            'booster': model.booster,
            'base_score': model.base_score,
            'fingerprint': model.fingerprint,
            'num_features': model.num_features,
            'best_iteration': model.best_iteration,
            'config': model.config,
            'trees': [{'nodes': len(tree), 'scale': scale} for tree, scale in zip(model.trees, model.scales)]}


def dumps_model(model):
    """The file content of a model, as bytes."""
    header = json.dumps(_header(model), sort_keys=True, separators=(',', ':')).encode('utf-8')
    blobs = b''.join(tree.nodes.astype(NODE_DTYPE).tobytes() for tree in model.trees)
    return MAGIC + _LENGTH.pack(len(header)) + header + blobs


def save_model(model, path):
    """Write a model file."""
    with open(path, 'wb') as fd_:
        fd_.write(dumps_model(model))
    LOG.debug("Saved %r to %s", model, path)


def loads_model(data, source='<bytes>'):
    """Decode model file content."""
    if data[:len(MAGIC_PREFIX)] == MAGIC_PREFIX and data[:len(MAGIC)] != MAGIC:
        raise VersionMismatch("%s: unsupported model format %r" % (source, data[:len(MAGIC)]))
    if data[:len(MAGIC)] != MAGIC or len(data) < len(MAGIC) + _LENGTH.size:
        raise CorruptModel("%s is not a model file" % source)
    (length,) = _LENGTH.unpack_from(data, len(MAGIC))
    offset = len(MAGIC) + _LENGTH.size
    try:
        header = json.loads(data[offset:offset + length].decode('utf-8'))
        version = header['version']
        tree_info = header['trees']
        num_features = int(header['num_features'])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError):
        raise CorruptModel("%s: unreadable model header" % source)
    if version != FORMAT_VERSION:
        raise VersionMismatch("%s: model format version %r, expected %d" % (source, version, FORMAT_VERSION))
    offset += length
    trees, scales = [], []
    for info in tree_info:
        nbytes = info['nodes'] * NODE_DTYPE.itemsize
        if len(data) < offset + nbytes:
            raise CorruptModel("%s: file ends inside tree %d" % (source, len(trees)))
        tree = RegressionTree(np.frombuffer(data, dtype=NODE_DTYPE, count=info['nodes'], offset=offset).copy())
        tree.validate(num_features)
        trees.append(tree)
        scales.append(info['scale'])
        offset += nbytes
    if offset != len(data):
        raise CorruptModel("%s: %d trailing bytes" % (source, len(data) - offset))
    return GbmModel(trees, scales, header['base_score'], header['booster'], header['fingerprint'], num_features,
                    config=header.get('config'), best_iteration=header.get('best_iteration'))


def load_model(path):
    """Read a model file written by :func:`save_model`."""
    with open(path, 'rb') as fd_:
        return loads_model(fd_.read(), source=path)
