# Configuration file for the Sphinx documentation builder.
#
# https://www.sphinx-doc.org/en/master/usage/configuration.html
import os
import re
import sys

sys.path.insert(0, os.path.abspath(".."))

# -- Project information -----------------------------------------------------

project = 'sslseg'
copyright = '2026, sslseg developers'
author = 'sslseg developers'

release = re.sub('^v', '', os.popen('git describe --tags').read().strip())
version = release

# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.mathjax",
    "sphinx.ext.viewcode",
    'sphinx.ext.napoleon',
    'sphinxarg.ext',
]

autodoc_mock_imports = [
    "torch",
    "numpy",
    "tqdm",
    "scipy",
    "cv2",
    "natsort",
]

source_suffix = '.rst'

master_doc = 'index'

exclude_patterns = []

# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'
html_theme_options = {
    'display_version': True,
    'prev_next_buttons_location': 'top',
    'style_nav_header_background': 'black',
    'collapse_navigation': True,
    'navigation_depth': 4,
}
