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

"""Tensor checkpoints and detector head surgery.

A checkpoint is an ordered set of named float32 tensors. The surgery
functions build the classification (or box regression) head of a task
detector from the head of a source detector: rows of classes that have a
counterpart in the source are copied, the remaining rows are freshly
initialized.

File layout (all integers little endian)::

    b'PWT1'                 magic
    uint32                  length of the manifest in bytes
    manifest                UTF-8 JSON list of {"name": ..., "shape": [...]}
    float32 blobs           one per manifest entry, row-major, in manifest order

"""

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from typing import NamedTuple, Optional

import numpy as np

from pyvrd.config import get_config
from pyvrd.core import PyvrdError

LOG = logging.getLogger(__name__)

MAGIC = b'PWT1'
_LENGTH = struct.Struct('<I')
_DTYPE = np.dtype('<f4')


class BadMagic(PyvrdError, IOError):
    """The file does not start with the checkpoint magic bytes."""


class TruncatedFile(PyvrdError, IOError):
    """The file ends before the manifest says it should."""


class ShapeMismatch(PyvrdError, ValueError):
    """Tensor shapes disagree with the data or with each other."""


class MissingTensor(PyvrdError, KeyError):
    """A tensor named by a head specification is absent from the store."""

    def __str__(self):
        return str(self.args[0]) if self.args else ''


class MapOutOfRange(PyvrdError, ValueError):
    """A class map entry points outside the task or source head."""


class BadClassMap(PyvrdError, ValueError):
    """A class map file is not a JSON object of class names."""


class TensorStore(object):
    """Ordered mapping of tensor names to float32 arrays.

    Stores are treated as immutable: :meth:`with_tensor` returns a new store.
    """

    def __init__(self, tensors=()):
        """Initialize the class instance."""
        if hasattr(tensors, 'items'):
            tensors = tensors.items()
        self._tensors = OrderedDict()
        for name, array in tensors:
            if not name:
                raise ValueError("Tensor names must be non-empty")
            if name in self._tensors:
                raise ValueError("Duplicate tensor name %r" % (name,))
            array = np.array(array, dtype=np.float32)
            array.setflags(write=False)
            self._tensors[name] = array

    def names(self):
        return list(self._tensors)

    def items(self):
        return list(self._tensors.items())

    def __getitem__(self, name):
        try:
            return self._tensors[name]
        except KeyError:
            raise MissingTensor("No tensor named %r in the store" % (name,))

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __eq__(self, other):
        if not isinstance(other, TensorStore) or self.names() != other.names():
            return False
        return all(self._tensors[name].shape == other[name].shape and
                   self._tensors[name].tobytes() == other[name].tobytes() for name in self._tensors)

    def __repr__(self):
        return "TensorStore(%s)" % ", ".join("%s%s" % (name, list(arr.shape)) for name, arr in self.items())

    def with_tensor(self, name, array):
        """A new store where *name* holds *array*; a new name is appended at the end."""
        tensors = OrderedDict(self._tensors)
        tensors[name] = array
        return TensorStore(tensors)

    def digest(self, name):
        """SHA-256 hex digest of the little-endian bytes of a tensor."""
        return hashlib.sha256(self[name].astype(_DTYPE).tobytes()).hexdigest()


def write_store(store, path):
    """Write a tensor store to *path*."""
    manifest = [{'name': name, 'shape': [int(dim) for dim in array.shape]} for name, array in store.items()]
    header = json.dumps(manifest, separators=(',', ':')).encode('utf-8')
    with open(path, 'wb') as fd_:
        fd_.write(MAGIC)
        fd_.write(_LENGTH.pack(len(header)))
        fd_.write(header)
        for _, array in store.items():
            fd_.write(np.ascontiguousarray(array, dtype=_DTYPE).tobytes())
    LOG.debug("Wrote %d tensors to %s", len(store), path)


def _parse_manifest(raw, path):
    try:
        manifest = json.loads(raw.decode('utf-8'))
    except (UnicodeDecodeError, ValueError):
        raise ShapeMismatch("%s: unreadable manifest" % path)
    if not isinstance(manifest, list):
        raise ShapeMismatch("%s: manifest is not a list" % path)
    entries = []
    for entry in manifest:
        try:
            name = entry['name']
            shape = tuple(entry['shape'])
        except (TypeError, KeyError):
            raise ShapeMismatch("%s: bad manifest entry %r" % (path, entry))
        if not all(isinstance(dim, int) and dim >= 0 for dim in shape):
            raise ShapeMismatch("%s: bad shape %r for tensor %r" % (path, list(shape), name))
        entries.append((name, shape))
    return entries


def read_store(path):
    """Read a tensor store written by :func:`write_store`."""
    with open(path, 'rb') as fd_:
        data = fd_.read()
    if data[:len(MAGIC)] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(data) and data:
            raise TruncatedFile("%s: file ends inside the magic bytes" % path)
        raise BadMagic("%s is not a tensor checkpoint (magic %r)" % (path, data[:len(MAGIC)]))
    offset = len(MAGIC) + _LENGTH.size
    if len(data) < offset:
        raise TruncatedFile("%s: file ends inside the header" % path)
    (manifest_length,) = _LENGTH.unpack_from(data, len(MAGIC))
    if len(data) < offset + manifest_length:
        raise TruncatedFile("%s: file ends inside the manifest" % path)
    entries = _parse_manifest(data[offset:offset + manifest_length], path)
    offset += manifest_length

    tensors = []
    for name, shape in entries:
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * _DTYPE.itemsize
        if len(data) < offset + nbytes:
            raise TruncatedFile("%s: file ends inside tensor %r" % (path, name))
        array = np.frombuffer(data, dtype=_DTYPE, count=count, offset=offset).reshape(shape)
        tensors.append((name, array))
        offset += nbytes
    if offset != len(data):
        raise ShapeMismatch("%s: %d bytes beyond the last tensor" % (path, len(data) - offset))
    LOG.debug("Read %d tensors from %s", len(tensors), path)
    return TensorStore(tensors)


class ClassMap(object):
    """Partial many-to-one map from task class ids to source class ids."""

    def __init__(self, mapping):
        """Initialize the class instance."""
        self._mapping = {int(task): int(source) for task, source in dict(mapping).items()}

    @classmethod
    def identity(cls, num_classes):
        return cls({idx: idx for idx in range(num_classes)})

    @classmethod
    def from_json(cls, path, task_vocab, source_vocab):
        """Read a ``{"task name": "source name"}`` JSON file, resolving names on both vocabularies."""
        with open(path, 'r', encoding='utf-8') as fd_:
            try:
                names = json.load(fd_)
            except ValueError as err:
                raise BadClassMap("%s: not valid JSON: %s" % (path, err))
        if not isinstance(names, dict) or not all(isinstance(name, str) for name in names.values()):
            raise BadClassMap("%s: expected an object mapping task names to source names" % path)
        return cls({task_vocab.class_id(task): source_vocab.class_id(source) for task, source in names.items()})

    def __len__(self):
        return len(self._mapping)

    def __contains__(self, task_id):
        return task_id in self._mapping

    def __getitem__(self, task_id):
        return self._mapping[task_id]

    def items(self):
        return sorted(self._mapping.items())

    def validate(self, task_class_count, source_class_count):
        for task, source in self._mapping.items():
            if not 0 <= task < task_class_count:
                raise MapOutOfRange("Task class %d outside the %d task classes" % (task, task_class_count))
            if not 0 <= source < source_class_count:
                raise MapOutOfRange("Source class %d outside the %d source head classes"
                                    % (source, source_class_count))
        return self


class HeadSpec(NamedTuple):
    """Where the per-class rows of a head live.

    The bias tensor always indexes classes along its first axis. Set
    *bias_tensor_name* to None for heads without bias.
    """

    weight_tensor_name: str
    bias_tensor_name: Optional[str] = None
    class_axis: int = 0
    rows_per_class: int = 1


class InitSpec(object):
    """Initialization of head rows that are not transferred."""

    def __init__(self, kind='normal', mean=0.0, std=0.01, seed=0, bias=0.0):
        """Initialize the class instance."""
        if kind != 'normal':
            raise ValueError("Only normal initialization is supported, got %r" % (kind,))
        if not std > 0:
            raise ValueError("Initialization std must be positive, got %r" % (std,))
        self.kind = kind
        self.mean = float(mean)
        self.std = float(std)
        self.seed = int(seed)
        self.bias = float(bias)

    @classmethod
    def from_config(cls, **overrides):
        section = get_config()['checkpoint']
        kwargs = {'mean': section['init_mean'], 'std': section['init_std'],
                  'bias': section['init_bias'], 'seed': section['seed']}
        kwargs.update({key: val for key, val in overrides.items() if val is not None})
        return cls(**kwargs)


def _class_rows(array, axis, rows_per_class, name):
    """View a head tensor as (classes, rows_per_class, rest...)."""
    if rows_per_class < 1:
        raise ValueError("rows_per_class must be at least 1")
    if not -array.ndim <= axis < array.ndim:
        raise ShapeMismatch("Class axis %d invalid for tensor %r of shape %s" % (axis, name, array.shape))
    moved = np.moveaxis(array, axis, 0)
    if moved.shape[0] % rows_per_class:
        raise ShapeMismatch("Tensor %r has %d rows, not a multiple of %d rows per class"
                            % (name, moved.shape[0], rows_per_class))
    return moved.reshape((moved.shape[0] // rows_per_class, rows_per_class) + moved.shape[1:])


def _from_class_rows(rows, axis):
    flat = rows.reshape((rows.shape[0] * rows.shape[1],) + rows.shape[2:])
    return np.moveaxis(flat, 0, axis)


def head_class_count(store, head):
    """Number of classes of a head."""
    return _class_rows(store[head.weight_tensor_name], head.class_axis, head.rows_per_class,
                       head.weight_tensor_name).shape[0]


def _head_tensors(store, head):
    """(weight rows, bias rows or None) of a head in class-row layout."""
    weight = _class_rows(store[head.weight_tensor_name], head.class_axis, head.rows_per_class,
                         head.weight_tensor_name)
    bias = None
    if head.bias_tensor_name is not None:
        bias = _class_rows(store[head.bias_tensor_name], 0, head.rows_per_class, head.bias_tensor_name)
        if bias.shape[0] != weight.shape[0]:
            raise ShapeMismatch("Bias %r has %d classes, weight %r has %d" % (
                head.bias_tensor_name, bias.shape[0], head.weight_tensor_name, weight.shape[0]))
    return weight, bias


def _with_head(src, head, weight, bias):
    out = src.with_tensor(head.weight_tensor_name, _from_class_rows(weight, head.class_axis))
    if bias is not None:
        out = out.with_tensor(head.bias_tensor_name, _from_class_rows(bias, 0))
    return out


def partial_weight_transfer(src, head, class_map, task_class_count, init, fallback=None):
    """Build a task head from a source head.

    Rows (and bias entries) of every mapped task class are copied verbatim
    from the rows of its source class. Rows of unmapped task classes are
    drawn from *init*, or copied from the same rows of *fallback* when a
    store holding an already sized task head is given. All other tensors of
    *src* are kept unchanged.
    """
    weight, bias = _head_tensors(src, head)
    class_map.validate(task_class_count, weight.shape[0])
    unmapped = [k for k in range(task_class_count) if k not in class_map]
    mapped = [k for k in range(task_class_count) if k in class_map]
    sources = [class_map[k] for k in mapped]

    new_weight = np.empty((task_class_count,) + weight.shape[1:], dtype=np.float32)
    new_weight[mapped] = weight[sources]
    new_bias = None
    if bias is not None:
        new_bias = np.empty((task_class_count,) + bias.shape[1:], dtype=np.float32)
        new_bias[mapped] = bias[sources]

    if fallback is not None:
        fb_weight, fb_bias = _head_tensors(fallback, head)
        if fb_weight.shape != new_weight.shape:
            raise ShapeMismatch("Fallback head has shape %s, expected %s" % (fb_weight.shape, new_weight.shape))
        new_weight[unmapped] = fb_weight[unmapped]
        if new_bias is not None:
            new_bias[unmapped] = fb_bias[unmapped]
        origin = "copied from the fallback store"
    else:
        rng = np.random.Generator(np.random.PCG64(init.seed))
        draws = rng.normal(init.mean, init.std, size=(len(unmapped),) + weight.shape[1:])
        new_weight[unmapped] = draws.astype(np.float32)
        if new_bias is not None:
            new_bias[unmapped] = np.float32(init.bias)
        origin = "drawn from N(%g, %g)" % (init.mean, init.std)

    LOG.info("transferred %d, initialized %d (%s)", len(mapped), len(unmapped), origin)
    return _with_head(src, head, new_weight, new_bias)


def attribute_class_map(pairs, class_map=None):
    """The many-to-one map sending pair index i to the source row of its object class.

    Without *class_map* the object class ids already are source rows.
    """
    mapping = {}
    for idx, (object_id, _attribute_id) in enumerate(pairs):
        if class_map is None:
            mapping[idx] = object_id
        elif object_id in class_map:
            mapping[idx] = class_map[object_id]
        else:
            raise MapOutOfRange("Object class %d of attribute pair %d has no source row" % (object_id, idx))
    return ClassMap(mapping)


def expand_attribute_head(src, head, pairs, class_map=None):
    """Build a head with one class row per (object class, attribute) pair.

    Every row starts from the source row of the pair's object class, so
    "wooden piano" and "plastic piano" both begin as "piano". Rows follow
    the order of *pairs*.
    """
    weight, bias = _head_tensors(src, head)
    mapping = attribute_class_map(pairs, class_map)
    mapping.validate(len(pairs), weight.shape[0])
    index = np.asarray([mapping[idx] for idx in range(len(pairs))], dtype=np.intp)
    new_bias = bias[index] if bias is not None else None
    LOG.info("expanded %d object-attribute rows from %d source classes", len(pairs), weight.shape[0])
    return _with_head(src, head, weight[index], new_bias)
