from __future__ import annotations

import os
from typing import Callable, Literal, Protocol, Union

import numpy as np
import numpy.typing as npt

Array = npt.NDArray[np.float64]
"A float64 numpy array.  Shapes are given in the docstrings of each function"

IndexArray = npt.NDArray[np.intp]
"An integer numpy array of indices, 0-based"

PathLike = Union[str, "os.PathLike[str]"]
"Anything :func:`open` accepts as a file name"

ShapeKind = Literal["mesh", "pointcloud", "auto"]
"""What :func:`dfr.geometry.load_shape` should produce.  ``auto`` gives a
mesh when the file has faces and a point cloud otherwise"""

NormalizeMode = Literal["center", "center_unit_area"]
"Modes for :func:`dfr.geometry.normalize_shape`"

AlignMode = Literal["rotation_file", "pca", "none"]
"Modes for :func:`dfr.pipeline.align_input`"

Stage = Literal["stage1", "stage2"]
"""Registration stage.  ``stage1`` finds correspondences in feature space,
``stage2`` in coordinate space"""


class CorrespondenceProvider(Protocol):
    "Supplies filtered correspondences during :func:`dfr.registration.optimize_stage`"

    def __call__(self, deformed: Array, iteration: int):
        "Returns a :class:`dfr.registration.CorrespondenceSet` for the deformed vertices"
        ...


FeatureRefresher = Callable[[Array], Array]
"""Called with deformed source vertices (N x 3) returning fresh source
features (N x d)"""
