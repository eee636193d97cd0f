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

"""Utility functions: logging switches, progress bars and optional parallel execution."""

import json
import logging

import numpy as np

TQDM_LOADED = True
try:
    from tqdm import tqdm
except ImportError:
    TQDM_LOADED = False

try:
    import dask
except ImportError:
    dask = None

LOG = logging.getLogger(__name__)


def _tqdm_or_iter(an_iterable, **tqdm_kwargs):
    """Wrap an iterable with tqdm if it is available, otherwise return the iterable."""
    if TQDM_LOADED:
        return tqdm(iterable=an_iterable, **tqdm_kwargs)
    else:
        return an_iterable


def map_tasks(func, items, parallel=False):
    """Apply *func* to every item and return the results in input order.

    With *parallel* set and dask installed, the calls run on dask's threaded
    scheduler. Results are the same either way.
    """
    items = list(items)
    if parallel and dask is None:
        LOG.warning("dask is not installed, running %d tasks sequentially", len(items))
    if parallel and dask is not None:
        delayed = [dask.delayed(func)(item) for item in items]
        return list(dask.compute(*delayed, scheduler='threads'))
    return [func(item) for item in items]


class _NumpyEncoder(json.JSONEncoder):
    """JSON encoder that understands numpy scalars and arrays."""

    def default(self, o):
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        return super(_NumpyEncoder, self).default(o)


def to_json(obj, **kwargs):
    """Serialize *obj* with sorted keys so equal content gives equal bytes."""
    kwargs.setdefault('indent', 2)
    return json.dumps(obj, cls=_NumpyEncoder, sort_keys=True, **kwargs)


def write_json(path, obj):
    """Write *obj* as JSON to *path*."""
    with open(path, 'w', encoding='utf-8', newline='\n') as fd_:
        fd_.write(to_json(obj))
        fd_.write('\n')
    LOG.debug("Wrote %s", path)


def debug_on():
    """Turn debugging logging on."""
    logging_on(logging.DEBUG)


_is_logging_on = False


def logging_on(level=logging.WARNING):
    """Turn logging on."""
    global _is_logging_on

    if not _is_logging_on:
        console = logging.StreamHandler()
        console.setFormatter(logging.Formatter("[%(levelname)s: %(asctime)s :"
                                               " %(name)s] %(message)s",
                                               '%Y-%m-%d %H:%M:%S'))
        console.setLevel(level)
        logging.getLogger('').addHandler(console)
        _is_logging_on = True

    log = logging.getLogger('')
    log.setLevel(level)
    for h in log.handlers:
        h.setLevel(level)


def logging_off():
    """Turn logging off."""
    global _is_logging_on
    logging.getLogger('').handlers = [logging.NullHandler()]
    _is_logging_on = False


def get_logger(name):
    """Return logger with null handle."""
    log = logging.getLogger(name)
    if not log.handlers:
        log.addHandler(logging.NullHandler())
    return log
