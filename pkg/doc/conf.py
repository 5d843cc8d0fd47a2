# -*- coding: utf-8 -*-
#

import os

# monkey patch https://github.com/sphinx-doc/sphinx/issues/11253
def split(self, input):
    res = []
    for word in sphinx.search.SearchLanguage.split(self, input):
        res.extend(word.split("_"))
    return res


import sphinx.search

sphinx.search.SearchEnglish.split = split
del split

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.intersphinx',
    "sphinx.ext.viewcode",
    "sphinx.ext.autosummary",
]

autodoc_preserve_defaults = True
autodoc_member_order = "bysource"

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable', None),
    'scipy': ('https://docs.scipy.org/doc/scipy', None),
}

# Add any paths that contain templates here, relative to this directory.
templates_path = ['_templates']

# The suffix of source filenames.
source_suffix = '.rst'

# The master toctree document.
master_doc = 'index'

pygments_style = 'vs'

project = 'dfr'

# The version is read from the package so docs can't drift from it
version = os.getenv("VERSION")
if not version:
    import re
    with open(os.path.join(os.path.dirname(__file__), "..", "dfr", "__init__.py"), encoding="utf8") as f:
        version = re.search(r'^__version__ = "([^"]+)"', f.read(), re.MULTILINE).group(1)
release = version

today = os.getenv("RELEASEDATE", "")
today_fmt = '%B %d, %Y'

exclude_trees = ['build']

html_title = f"{ project } { version } documentation"

html_theme = 'sphinx_rtd_theme'
html_theme_options = {
    "style_external_links": True,
    "prev_next_buttons_location": "both",
}

html_static_path = []
html_last_updated_fmt = '%b %d, %Y'

singlehtml_sidebars = {"index": ["globaltoc.html"]}
