# Sphinx configuration for the headswap documentation.

import os
import sys

sys.path.insert(0, os.path.abspath(".."))

project = 'headswap'
copyright = '2025, headswap developers'
author = 'headswap developers'
release = '0.1.0'

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.intersphinx',
    'sphinx.ext.napoleon',
    'sphinx.ext.viewcode',
    'myst_parser',
]

templates_path = ['_templates']
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

source_suffix = {
    '.rst': None,
    '.md': 'myst_parser',
}

html_theme = 'sphinx_rtd_theme'
html_static_path = ['_static']

# Building the docs must not need the numeric stack.
autodoc_mock_imports = ['torch', 'scipy', 'PIL']
autodoc_member_order = 'bysource'
autodoc_typehints = 'description'

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'torch': ('https://pytorch.org/docs/stable/', None),
}

napoleon_google_docstring = True
napoleon_numpy_docstring = False
napoleon_include_init_with_doc = False
napoleon_use_param = True
napoleon_use_rtype = True
