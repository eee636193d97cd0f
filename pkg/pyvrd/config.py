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

"""Pyvrd configuration file handling."""

import copy
import logging
import os
from collections.abc import Mapping
from os.path import expanduser

import yaml
from appdirs import AppDirs

LOG = logging.getLogger(__name__)

BUILTIN_CONFIG_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'etc', 'pyvrd.yaml')

CONFIG_ENV_VARIABLE = 'PYVRD_CONFIG_FILE'

CONFIG_FILE = os.environ.get(CONFIG_ENV_VARIABLE)

if CONFIG_FILE is not None and (not os.path.exists(CONFIG_FILE) or
                                not os.path.isfile(CONFIG_FILE)):
    raise IOError(str(CONFIG_FILE) + " pointed to by the environment " +
                  "variable " + CONFIG_ENV_VARIABLE + " is not a file or does not exist!")


def recursive_dict_update(d, u):
    """Recursive dictionary update.

    Nested mappings in *u* are merged into *d* instead of replacing them, so a
    user file only needs to carry the keys it changes.

    """
    for k, v in u.items():
        if isinstance(v, Mapping):
            r = recursive_dict_update(d.get(k, {}), v)
            d[k] = r
        else:
            d[k] = u[k]
    return d


def _read_yaml(filename):
    with open(filename, 'r') as fp_:
        return yaml.safe_load(fp_) or {}


def get_config(configfile=None):
    """Get the configuration from file.

    The built-in file is always read first. A user file, given as argument or
    through the PYVRD_CONFIG_FILE environment variable, is merged on top.

    """
    config = recursive_dict_update({}, _read_yaml(BUILTIN_CONFIG_FILE))

    user_file = configfile or CONFIG_FILE
    if user_file is not None:
        if not os.path.isfile(user_file):
            raise IOError("Config file does not exist: " + str(user_file))
        LOG.debug("Merging user configuration from %s", user_file)
        config = recursive_dict_update(config, _read_yaml(user_file))

    app_dirs = AppDirs('pyvrd', 'pyvrd')
    config['model_dir'] = expanduser(config.get('model_dir') or app_dirs.user_data_dir)

    return copy.deepcopy(config)


def get_section(*keys, configfile=None):
    """Return a nested section of the configuration, e.g. ``get_section('gbm', 'aggregator')``."""
    section = get_config(configfile)
    for key in keys:
        section = section[key]
    return section
