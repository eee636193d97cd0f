#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Pyvrd documentation build configuration file.
#
# This file is execfile()d with the current directory set to its containing dir.

import os
import sys

from pkg_resources import get_distribution

# If extensions (or modules to document with autodoc) are in another directory,
# add these directories to sys.path here.
DOC_SOURCES_DIR = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, DOC_SOURCES_DIR)
sys.path.insert(0, os.path.abspath('../'))

# The full version, including alpha/beta/rc tags.
release = get_distribution('pyvrd').version
# The short X.Y version.
version = '.'.join(release.split('.')[:2])


class Mock(object):
    """Mock class for doc building without the optional dependencies."""

    __all__ = []

    def __init__(self, *args, **kwargs):
        pass

    def __call__(self, *args, **kwargs):
        return Mock()

    @classmethod
    def __getattr__(cls, name):
        if name in ('__file__', '__path__'):
            return '/dev/null'
        elif name[0] == name[0].upper():
            mockType = type(name, (), {})
            mockType.__module__ = __name__
            return mockType
        else:
            return Mock()


MOCK_MODULES = ['dask', 'h5py', 'tqdm', 'matplotlib', 'matplotlib.pyplot']
for mod_name in MOCK_MODULES:
    sys.modules[mod_name] = Mock()

# -- General configuration -----------------------------------------------------

extensions = ['sphinx.ext.autodoc', 'sphinx.ext.doctest',
              'sphinx.ext.todo', 'sphinx.ext.coverage',
              'sphinx.ext.intersphinx', 'sphinx.ext.napoleon']

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = u'Pyvrd'
copyright = u'2024, Pyvrd developers'

exclude_patterns = ['_build']
pygments_style = 'sphinx'

# -- Options for HTML output ---------------------------------------------------

html_theme = 'default'
htmlhelp_basename = 'Pyvrddoc'

# -- Options for LaTeX output --------------------------------------------------

latex_documents = [
    ('index', 'Pyvrd.tex', u'Pyvrd Documentation',
     u'Pyvrd developers', 'manual'),
]

# -- Options for manual page output --------------------------------------------

man_pages = [
    ('index', 'pyvrd', u'Pyvrd Documentation',
     [u'Pyvrd developers'], 1)
]

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable', None),
    'scipy': ('https://docs.scipy.org/doc/scipy', None),
    'h5py': ('https://docs.h5py.org/en/stable', None),
}
