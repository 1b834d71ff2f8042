# -*- coding: utf-8 -*-
#
# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

# lattice-servo documentation build configuration file
#
# This file is executed with the current directory set to its containing dir.

import os
import sys

# The package is documented from the source tree.
sys.path.insert(0, os.path.abspath(".."))

version_info = {}
with open(os.path.join("..", "version.py")) as fp:
    exec(fp.read(), version_info)
__version__ = version_info["__version__"]

# -- General configuration ------------------------------------------------

needs_sphinx = "1.5.5"

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.autosummary",
    "sphinx.ext.intersphinx",
    "sphinx.ext.coverage",
    "sphinx.ext.doctest",
    "sphinx.ext.napoleon",
    "sphinx.ext.todo",
    "sphinx.ext.viewcode",
    "recommonmark",
]

autoclass_content = "both"
autodoc_default_options = {"members": True}
autosummary_generate = True

templates_path = ["_templates"]
source_suffix = [".rst", ".md"]
master_doc = "index"

project = "lattice-servo"
copyright = "2026, The lattice-servo Authors"
author = "The lattice-servo Authors"

release = __version__
version = ".".join(release.split(".")[0:2])

language = None
exclude_patterns = ["_build"]
pygments_style = "sphinx"
todo_include_todos = True

# -- Options for HTML output ----------------------------------------------

html_theme = "alabaster"
html_theme_options = {
    "description": "Lattice tracking and shape servoing of elastic objects",
    "font_family": "'Roboto', Georgia, sans",
    "head_font_family": "'Roboto', Georgia, serif",
    "code_font_family": "'Roboto Mono', 'Consolas', monospace",
}
html_static_path = []
htmlhelp_basename = "lattice-servo-doc"

default_role = "any"
suppress_warnings = ["ref.python"]

# -- Options for manual page output ---------------------------------------

man_pages = [
    (master_doc, "lattice-servo", "lattice-servo Documentation", [author], 1)
]

intersphinx_mapping = {
    "python": ("https://docs.python.org/3/", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
    "scipy": ("https://docs.scipy.org/doc/scipy/", None),
    "pandas": ("https://pandas.pydata.org/docs/", None),
}

# Napoleon settings
napoleon_google_docstring = True
napoleon_numpy_docstring = True
napoleon_include_private_with_doc = False
napoleon_include_special_with_doc = True
napoleon_use_admonition_for_examples = False
napoleon_use_admonition_for_notes = False
napoleon_use_admonition_for_references = False
napoleon_use_ivar = False
napoleon_use_param = True
napoleon_use_rtype = True
