# Copyright 2021 - 2023 Universität Tübingen, DKFZ, EMBL, and Universität zu Köln
# for the German Human Genome-Phenome Archive (GHGA)
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""General testing utilities"""

from pathlib import Path

import numpy as np

BASE_DIR = Path(__file__).parent.resolve()


def write_text_file(path: Path, content: str) -> Path:
    """Write `content` to `path` and return the path."""
    path.write_text(content)
    return path


def central_gradient(func, point: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    point = np.asarray(point, dtype=float)
    grad = np.empty_like(point)
    for index in range(point.size):
        shift = np.zeros_like(point)
        shift[index] = step
        grad[index] = (func(point + shift) - func(point - shift)) / (2.0 * step)
    return grad
