#!/usr/bin/env python3

from __future__ import annotations

import pathlib
import re
import sys

from setuptools import setup, Command


def read_whole_file(name, mode):
    assert mode == "rt"
    with open(name, mode, encoding="utf8") as f:
        return f.read()


# work out version number
version = re.search(r'^__version__ = "([^"]+)"', read_whole_file("dfr/__init__.py", "rt"), re.MULTILINE).group(1)


class run_tests(Command):

    description = "Run test suite"

    # 'verbose' is builtin and defaults to 1 (--quiet is also builtin
    # and forces verbose to 0)
    user_options = [
        ("show-tests", "v", "Show each test being run"),
        ("quick", "q", "Skip the registration, batch and shell tests"),
    ]

    boolean_options = ['show-tests', 'quick']

    def initialize_options(self):
        self.show_tests = 0
        self.quick = 0

    def finalize_options(self):
        pass

    def run(self):
        import unittest
        import dfr.tests
        loader = unittest.TestLoader()
        if self.quick:
            suite = loader.loadTestsFromTestCase(dfr.tests.DFR)
        else:
            suite = loader.loadTestsFromModule(dfr.tests)
        # verbosity of zero doesn't print anything, one prints a dot
        # per test and two prints each test name
        result = unittest.TextTestRunner(verbosity=self.show_tests + 1).run(suite)
        if not result.wasSuccessful():
            sys.exit(1)


if __name__ == '__main__':
    setup(name="dfr",
          version=version,
          python_requires=">=3.10",
          description="Feature guided non-rigid registration of triangle meshes with a deformation graph",
          long_description=pathlib.Path("README.rst").read_text(encoding="utf8"),
          long_description_content_type="text/x-rst",
          classifiers=[
              "Development Status :: 4 - Beta",
              "Intended Audience :: Science/Research",
              "License :: OSI Approved",
              "Programming Language :: Python :: 3",
              "Topic :: Scientific/Engineering :: Mathematics",
              "Topic :: Multimedia :: Graphics :: 3D Modeling",
          ],
          keywords=["mesh", "registration", "shape correspondence", "functional maps"],
          license="OSI Approved",
          platforms="any",
          install_requires=["numpy>=1.23", "scipy>=1.9"],
          packages=["dfr"],
          package_data={"dfr": ["py.typed"]},
          entry_points={"console_scripts": ["dfr = dfr.shell:main"]},
          cmdclass={
              'test': run_tests,
          })
