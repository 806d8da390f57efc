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

"""pandas-based CSV reading and writing of datasets."""

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from seqfa.core import models
from seqfa.ports.outbound.dataset import DatasetStorePort

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
SIDECAR_SUFFIX = ".truth.json"


def sidecar_path(path: Path) -> Path:
    """Where the true parameters of a simulated dataset are stored."""
    return path.with_name(path.stem + SIDECAR_SUFFIX)


class CsvDatasetStore(DatasetStorePort):
    """Reads and writes datasets as CSV files with a header row of item names."""

    def _format_error(self, path: Path, problem: str) -> DatasetStorePort.DatasetFormatError:
        error = self.DatasetFormatError(path=path, problem=problem)
        log.error(error, extra={"path": str(path)})
        return error

    def _load_frame(self, path: Path) -> pd.DataFrame:
        try:
            frame = pd.read_csv(path, skipinitialspace=True)
        except pd.errors.ParserError as error:
            raise self._format_error(path, "rows have different lengths") from error
        except pd.errors.EmptyDataError as error:
            raise self._format_error(path, "the file is empty") from error

        if frame.empty:
            raise self._format_error(path, "the file holds no observations")
        if frame.isna().to_numpy().any():
            raise self._format_error(path, "rows have different lengths or empty cells")
        numeric = frame.apply(pd.to_numeric, errors="coerce")
        if numeric.isna().to_numpy().any():
            column = numeric.columns[numeric.isna().any()][0]
            raise self._format_error(path, f"column '{column}' holds non-numeric cells")
        return numeric.astype(float)

    @staticmethod
    def _infer_kind(values: np.ndarray, path: Path) -> models.DataKind:
        if np.all(np.isin(values, (0.0, 1.0))):
            return models.DataKind.BINARY
        if np.all(values == np.round(values)):
            log.warning(
                "The integer items of '%s' are not all 0/1, treating them as continuous.",
                path,
                extra={"path": str(path)},
            )
        return models.DataKind.CONTINUOUS

    def read(
        self,
        *,
        path: Path,
        kind: Optional[models.DataKind] = None,
        standardize: bool = False,
    ) -> models.Dataset:
        """Read a dataset, inferring its kind unless given."""
        frame = self._load_frame(path)
        values = frame.to_numpy()
        kind = self._infer_kind(values, path) if kind is None else kind

        if kind == models.DataKind.BINARY:
            if not np.all(np.isin(values, (0.0, 1.0))):
                raise self._format_error(path, "binary items may only hold 0 and 1")
            if standardize:
                raise self._format_error(path, "binary items cannot be standardized")
        else:
            sd = values.std(axis=0, ddof=1) if len(values) > 1 else np.zeros(values.shape[1])
            constant = [name for name, s in zip(frame.columns, sd) if not s > 0]
            if constant:
                raise self._format_error(
                    path, f"continuous items must vary, constant: {', '.join(constant)}"
                )
            if standardize:
                values = (values - values.mean(axis=0)) / sd

        n, p = values.shape
        if n < p:
            log.warning(
                "The dataset '%s' has fewer observations than items.",
                path,
                extra={"path": str(path), "n": n, "p": p},
            )
        log.info(
            "Read %i observations of %i %s items.",
            n,
            p,
            kind.value,
            extra={"path": str(path), "standardized": standardize},
        )
        return models.Dataset(
            values=values, kind=kind, item_names=tuple(str(c) for c in frame.columns)
        )

    def write(
        self,
        *,
        path: Path,
        dataset: models.Dataset,
        truth: Optional[models.TrueParameters] = None,
    ) -> None:
        """Write a dataset, binary items as integers, and the optional sidecar."""
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(dataset.values, columns=list(dataset.item_names))
        if dataset.kind == models.DataKind.BINARY:
            frame = frame.astype(int)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        if truth is not None:
            sidecar_path(path).write_text(truth.model_dump_json(indent=2) + "\n")
        log.info(
            "Wrote dataset to '%s'.",
            path,
            extra={"path": str(path), "n": dataset.n, "p": dataset.p},
        )
