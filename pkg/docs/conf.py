# -*- coding: utf-8 -*-
#
# lambdappo documentation build configuration file.
#
# This file is execfile()d with the current directory set to its containing
# dir.

import sys
from importlib import metadata

# -- General configuration ----------------------------------------------------

extensions = ['sphinx.ext.autodoc', 'sphinx.ext.coverage',
              'sphinx.ext.viewcode', 'sphinx.ext.intersphinx',
              'sphinx.ext.todo']

templates_path = ['_templates']

source_suffix = '.rst'

master_doc = 'index'

project = u'lambdappo'
copyright = u'2024, lambdappo developers'

try:
    release = metadata.version('lambdappo')
except metadata.PackageNotFoundError:
    print('To build the documentation, The distribution information of '
          'lambdappo')
    print('has to be available. Either install the package into your')
    print('development environment or run "pip install -e ." to setup the')
    print('metadata. A virtualenv is recommended!')
    sys.exit(1)

if 'dev' in release:
    release = release.split('dev')[0] + 'dev'
version = '.'.join(release.split('.')[:2])

exclude_patterns = ['_build']

pygments_style = 'sphinx'

# -- Options for HTML output --------------------------------------------------

html_theme = 'alabaster'

html_static_path = ['_static']

html_show_sourcelink = False

htmlhelp_basename = 'lambdappodoc'

# -- Options for LaTeX output -------------------------------------------------

latex_documents = [
    ('index', 'lambdappo.tex', u'lambdappo Documentation',
     u'lambdappo developers', 'manual'),
]

# -- Options for manual page output -------------------------------------------

man_pages = [
    ('index', 'lambdappo', u'lambdappo Documentation',
     [u'lambdappo developers'], 1)
]

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable', None),
}

todo_include_todos = True
