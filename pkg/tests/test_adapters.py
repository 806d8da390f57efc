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

"""Tests for the CSV dataset, artifact and checkpoint stores."""

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from seqfa.adapters.outbound.artifacts import FileArtifactStore
from seqfa.adapters.outbound.checkpoint import JsonCheckpointStore
from seqfa.adapters.outbound.csv_dataset import CsvDatasetStore, sidecar_path
from seqfa.core.distributions import RngStream
from seqfa.core.hmc import HmcTuningConfig
from seqfa.core.models import DataKind, Scenario, TrueParameters
from seqfa.core.simulate import simulate_scenario
from seqfa.core.smc import EngineConfig, SequentialEngine
from seqfa.ports.outbound.artifacts import ArtifactStorePort
from seqfa.ports.outbound.checkpoint import CheckpointStorePort
from seqfa.ports.outbound.dataset import DatasetStorePort
from tests.fixtures.example_data import GaussianMeanModel
from tests.fixtures.utils import write_text_file


def test_read_binary_two_by_two(tmp_path: Path):
    """A 0/1 file is inferred to be binary and keeps its item names."""
    path = write_text_file(tmp_path / "small.csv", "q1,q2\n1,0\n0,1\n")
    dataset = CsvDatasetStore().read(path=path)

    assert dataset.kind == DataKind.BINARY
    assert dataset.item_names == ("q1", "q2")
    assert_array_equal(dataset.values, [[1.0, 0.0], [0.0, 1.0]])


def test_read_continuous_and_standardize(tmp_path: Path):
    """Standardized items have mean zero and unit sample sd."""
    path = write_text_file(tmp_path / "cont.csv", "a,b\n1.5,2\n2.5,-1\n4.0,0.5\n")
    store = CsvDatasetStore()
    raw = store.read(path=path)
    scaled = store.read(path=path, standardize=True)

    assert raw.kind == DataKind.CONTINUOUS
    assert_allclose(raw.values[:, 0], [1.5, 2.5, 4.0])
    assert_allclose(scaled.values.mean(axis=0), 0.0, atol=1e-12)
    assert_allclose(scaled.values.std(axis=0, ddof=1), 1.0)


def test_integer_items_beyond_binary_are_continuous(tmp_path: Path, caplog):
    """Integer items with a value other than 0/1 are read as continuous with a warning."""
    path = write_text_file(tmp_path / "likert.csv", "a,b\n0,1\n2,1\n1,0\n")
    with caplog.at_level(logging.WARNING):
        dataset = CsvDatasetStore().read(path=path)

    assert dataset.kind == DataKind.CONTINUOUS
    assert any("treating them as continuous" in record.message for record in caplog.records)


def test_explicit_kind_overrides_inference(tmp_path: Path):
    """A binary file may be declared continuous."""
    path = write_text_file(tmp_path / "small.csv", "a,b\n1,0\n0,1\n1,1\n")
    dataset = CsvDatasetStore().read(path=path, kind=DataKind.CONTINUOUS)

    assert dataset.kind == DataKind.CONTINUOUS


@pytest.mark.parametrize(
    "content, kind, standardize, problem",
    [
        ("a,b\n1,2\n3,4,5\n", None, False, "different lengths"),
        ("a,b\n1,2\n3\n", None, False, "different lengths"),
        ("a,b\n1,x\n3,4\n", None, False, "non-numeric"),
        ("a,b\n1.5,2\n1.5,3\n", None, False, "constant: a"),
        ("a,b\n0,2\n1,0\n", DataKind.BINARY, False, "only hold 0 and 1"),
        ("a,b\n0,1\n1,0\n", None, True, "cannot be standardized"),
        ("a,b\n", None, False, "no observations"),
        ("", None, False, "empty"),
    ],
    ids=[
        "long-row",
        "short-row",
        "non-numeric",
        "constant",
        "not-binary",
        "standardize-binary",
        "header-only",
        "empty",
    ],
)
def test_malformed_files(
    tmp_path: Path, content: str, kind, standardize: bool, problem: str
):
    """Malformed files are rejected with a description of the problem."""
    path = write_text_file(tmp_path / "bad.csv", content)
    with pytest.raises(DatasetStorePort.DatasetFormatError, match=problem):
        CsvDatasetStore().read(path=path, kind=kind, standardize=standardize)


def test_fewer_observations_than_items_warns(tmp_path: Path, caplog):
    """Short datasets are accepted with a warning."""
    path = write_text_file(tmp_path / "wide.csv", "a,b,c\n0.1,0.2,0.3\n0.4,0.1,0.9\n")
    with caplog.at_level(logging.WARNING):
        dataset = CsvDatasetStore().read(path=path)

    assert dataset.n == 2
    assert any("fewer observations" in record.message for record in caplog.records)


@pytest.mark.parametrize("scenario", [Scenario.CONTINUOUS1, Scenario.BINARY1])
def test_write_then_read(tmp_path: Path, scenario: Scenario):
    """Written datasets are read back exactly, together with their true parameters."""
    dataset, truth = simulate_scenario(scenario, 25, seed=2)
    path = tmp_path / "nested" / "data.csv"
    store = CsvDatasetStore()
    store.write(path=path, dataset=dataset, truth=truth)

    restored = store.read(path=path)
    assert restored.kind == dataset.kind
    assert restored.item_names == dataset.item_names
    assert_array_equal(restored.values, dataset.values)

    sidecar = TrueParameters.model_validate_json(sidecar_path(path).read_text())
    assert sidecar == truth
    if scenario == Scenario.BINARY1:
        assert path.read_text().splitlines()[1].count(".") == 0


def test_sidecar_path():
    """The sidecar sits next to the dataset."""
    assert sidecar_path(Path("runs/data.csv")) == Path("runs/data.truth.json")


def test_artifact_store(tmp_path: Path):
    """Frames, text and JSON are stored below the root and read back."""
    store = FileArtifactStore(root=tmp_path / "run")
    frame = pd.DataFrame({"EFA1": [-1.25, -2.5]}, index=pd.Index([1, 2], name="index"))
    store.write_frame(name="sub/evidence.csv", frame=frame)
    store.write_text(name="summary.txt", text="hello\n")
    store.write_json(name="meta.json", payload={"b": 1, "a": [1, 2]})

    pd.testing.assert_frame_equal(store.read_frame(name="sub/evidence.csv"), frame)
    assert store.read_text(name="summary.txt") == "hello\n"
    assert store.read_json(name="meta.json") == {"a": [1, 2], "b": 1}
    raw = (tmp_path / "run" / "meta.json").read_text()
    assert raw.index('"a"') < raw.index('"b"')


def test_artifact_store_keeps_full_precision(tmp_path: Path):
    """Floats survive a CSV round trip bit for bit."""
    store = FileArtifactStore(root=tmp_path)
    values = np.random.default_rng(0).standard_normal(5)
    store.write_frame(name="values.csv", frame=pd.DataFrame({"x": values}))

    assert_array_equal(store.read_frame(name="values.csv")["x"].to_numpy(), values)


def test_missing_artifact(tmp_path: Path):
    """Reading an artifact that was never written fails."""
    with pytest.raises(ArtifactStorePort.ArtifactNotFoundError, match="summary.txt"):
        FileArtifactStore(root=tmp_path).read_text(name="summary.txt")


TUNING = HmcTuningConfig(pilot_steps=20, short_steps=2, n_leapfrog=4, batch_steps=40)


def toy_engine(store: Optional[JsonCheckpointStore] = None) -> SequentialEngine:
    """A small engine on the conjugate toy model."""
    return SequentialEngine(
        model=GaussianMeanModel(),
        config=EngineConfig(n_particles=20),
        tuning=TUNING,
        stream=RngStream(seed=1),
        label="toy",
        checkpoint_store=store,
    )


def test_checkpoint_store_keeps_latest_snapshot(tmp_path: Path):
    """The latest snapshot of an engine is stored atomically."""
    store = JsonCheckpointStore(directory=tmp_path / "checkpoints")
    engine = toy_engine(store)
    engine.run(until=3)

    snapshot = store.load(label="toy")
    assert snapshot.i_processed == 3
    assert snapshot.label == "toy"
    assert not list((tmp_path / "checkpoints").glob("*.tmp"))
    assert json.loads((tmp_path / "checkpoints" / "toy.json").read_text())["label"] == "toy"


def test_resume_from_checkpoint(tmp_path: Path):
    """An engine resumed from its checkpoint finishes like an uninterrupted one."""
    whole = toy_engine()
    whole.run()

    store = JsonCheckpointStore(directory=tmp_path)
    toy_engine(store).run(until=4)
    resumed = SequentialEngine.from_checkpoint(
        store,
        label="toy",
        model=GaussianMeanModel(),
        config=EngineConfig(n_particles=20),
        tuning=TUNING,
    )
    resumed.run()

    assert resumed.ledger.increments == whole.ledger.increments
    assert store.load(label="toy").i_processed == GaussianMeanModel().n_observations


def test_missing_checkpoint(tmp_path: Path):
    """Loading an unknown checkpoint fails."""
    with pytest.raises(CheckpointStorePort.CheckpointNotFoundError):
        JsonCheckpointStore(directory=tmp_path).load(label="EFA1")
