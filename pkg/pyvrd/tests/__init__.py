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

"""The tests package."""

import doctest
import unittest

from pyvrd import core, ensemble, features, ingest, sampler, stages, synthetic
from pyvrd import eval as relation_eval


def suite():
    """Collect the doctests of the module documentation."""
    mysuite = unittest.TestSuite()
    for module in (core, ingest, sampler, ensemble, features, stages, relation_eval, synthetic):
        mysuite.addTests(doctest.DocTestSuite(module))
    return mysuite


if __name__ == '__main__':
    unittest.TextTestRunner(verbosity=2).run(suite())
