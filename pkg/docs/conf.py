# Sphinx configuration for the SpatialIB API docs.

import os
import sys

sys.path.insert(0, os.path.abspath("../src"))

project = "SpatialIB"
author = "SpatialIB developers"

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.napoleon",
    "myst_parser",
]
exclude_patterns = ["_build"]

html_theme = "piccolo_theme"
