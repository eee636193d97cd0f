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

"""Pyvrd package init.

A three-stage visual relationship detection toolkit: object detection
plumbing (class-balanced sampling, head transfer, weighted NMS), a
spatio-semantic boosted-tree stage and a third stage aggregating it with
visual scores.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version(__name__)
except PackageNotFoundError:
    # package is not installed
    pass
