#!/usr/bin/env python
# -*- coding: utf-8 -*-

# Copyright (c) 2024 Pyvrd developers
#
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.

# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <http://www.gnu.org/licenses/>.

"""Setup for the Pyvrd package."""

import os.path

from setuptools import find_packages, setup

try:
    # HACK: https://github.com/pypa/setuptools_scm/issues/190#issuecomment-351181286
    # Stop setuptools_scm from including all repository files
    import setuptools_scm.integration
    setuptools_scm.integration.find_files = lambda _: []
except ImportError:
    pass


description = ('Visual relationship detection: class-balanced sampling, detection head transfer, '
               'weighted NMS, spatio-semantic boosted trees and score aggregation')

try:
    with open('./README.md', 'r') as fd:
        long_description = fd.read()
except IOError:
    long_description = ''

requires = ['numpy', 'scipy', 'h5py>=2.5', 'pyyaml', 'appdirs']

dask_extra = ['dask[array]']
test_requires = ['pyyaml', 'dask[array]', 'pytest', 'tqdm']

NAME = 'pyvrd'

setup(name=NAME,
      description=description,
      author='Pyvrd developers',
      classifiers=['Development Status :: 4 - Beta',
                   'Intended Audience :: Science/Research',
                   'License :: OSI Approved :: GNU General Public License v3 ' +
                   'or later (GPLv3+)',
                   'Operating System :: OS Independent',
                   'Programming Language :: Python',
                   'Topic :: Scientific/Engineering :: Image Recognition'],
      long_description=long_description,
      long_description_content_type='text/markdown',
      license='GPLv3',

      packages=find_packages(),
      include_package_data=True,
      package_data={
          'pyvrd': [os.path.join('etc', 'pyvrd.yaml')],
      },

      install_requires=requires,
      extras_require={'matplotlib': ['matplotlib'],
                      'tqdm': ['tqdm'],
                      'dask': dask_extra},
      scripts=['bin/pyvrd.py', 'bin/plot_class_distribution.py'],
      entry_points={'console_scripts': ['pyvrd = pyvrd.cli:main']},
      test_suite='pyvrd.tests.suite',
      tests_require=test_requires,
      python_requires='>=3.8',
      zip_safe=False,
      use_scm_version=True
      )
