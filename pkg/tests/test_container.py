import json

import numpy as np
import pytest
import torch

from pyegopose.executors import container
from pyegopose.modules import digests, enums
from pyegopose.modules.exceptions import ConfigError, MissingArtifact
from pyegopose.modules.structures import ImputedTrajectory, MotionSequence


def test_container_types_and_digest(tmp_path):
    arrays = {
        "values": np.linspace(0.0, 1.0, 6).reshape(2, 3),
        "mask": np.array([True, False, True]),
        "index": np.arange(4, dtype=np.int64),
    }
    digest = container.write_container(tmp_path, "sample", arrays, {"note": "x"})
    assert digest == digests.container_digest(tmp_path)
    metadata, loaded = container.read_container(tmp_path, "sample")
    assert metadata == {"note": "x"}
    assert loaded["values"].dtype == np.float32
    assert loaded["mask"].dtype == np.bool_
    assert loaded["index"].dtype == np.int32
    np.testing.assert_allclose(loaded["values"], arrays["values"], rtol=1e-6)
    np.testing.assert_array_equal(loaded["mask"], arrays["mask"])
    with open(tmp_path / enums.Artifacts.manifest) as file:
        assert json.load(file)["arrays"]["values"]["dtype"] == "<f4"


def test_container_digest_is_stable(tmp_path):
    arrays = {"values": np.ones((3, 2))}
    first = container.write_container(tmp_path / "a", "sample", arrays, {})
    second = container.write_container(tmp_path / "b", "sample", arrays, {})
    assert first == second
    assert first != container.write_container(tmp_path / "c", "sample", {"values": np.zeros((3, 2))}, {})


def test_container_errors(tmp_path):
    with pytest.raises(MissingArtifact):
        container.read_container(tmp_path)
    container.write_container(tmp_path, "sample", {"values": np.ones(2)}, {})
    with pytest.raises(ConfigError):
        container.read_container(tmp_path, "dataset")
    (tmp_path / "values.bin").unlink()
    with pytest.raises(MissingArtifact):
        container.read_container(tmp_path, "sample")


def test_container_schema_version(tmp_path):
    container.write_container(tmp_path, "sample", {"values": np.ones(2)}, {})
    manifest_path = tmp_path / enums.Artifacts.manifest
    manifest = json.loads(manifest_path.read_text())
    manifest["schema_version"] = -1
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ConfigError):
        container.read_container(tmp_path)


def test_skeleton_metadata_round_trip(skeleton):
    restored = container.skeleton_from_metadata(container.skeleton_metadata(skeleton))
    assert restored.names == skeleton.names
    assert restored.parents == skeleton.parents
    assert restored.regions == skeleton.regions
    np.testing.assert_array_equal(restored.offsets, skeleton.offsets)


def test_imputed_round_trip(tmp_path, rng):
    trajectories = [
        ImputedTrajectory(
            mean=rng.normal(size=(5, 2, 9)),
            uncertainty=rng.uniform(size=(5, 2, 9)),
            kind=enums.UncertaintyKind.total,
            visibility=rng.random((5, 2)) > 0.5,
        )
        for _ in range(2)
    ]
    container.write_imputed(tmp_path, [4, 5], trajectories, {"method": "ensemble"})
    metadata, loaded = container.read_imputed(tmp_path)
    assert metadata["seeds"] == [4, 5]
    assert metadata["method"] == "ensemble"
    assert loaded[1].kind == enums.UncertaintyKind.total
    np.testing.assert_array_equal(loaded[1].visibility, trajectories[1].visibility)
    np.testing.assert_allclose(loaded[1].mean, trajectories[1].mean, rtol=1e-6)


def test_predictions_round_trip(tmp_path, motion):
    prediction = MotionSequence(
        skeleton=motion.skeleton,
        fps=motion.fps,
        root=motion.root,
        rotations=motion.rotations,
        positions=np.zeros((len(motion), motion.skeleton.joint_count, 3)),
    )
    variance = np.full(len(motion), 0.5)
    container.write_predictions(tmp_path, [3], [prediction], [variance], {"strategy": "sample"})
    metadata, sequences, variances = container.read_predictions(tmp_path)
    assert metadata["strategy"] == "sample"
    assert sequences[0].skeleton.names == motion.skeleton.names
    np.testing.assert_array_equal(sequences[0].positions, 0.0)
    np.testing.assert_allclose(variances[0], variance)


def test_checkpoint_round_trip(tmp_path):
    module = torch.nn.BatchNorm1d(3)
    container.write_checkpoint(tmp_path, {"norm": module}, {"seed": 1})
    metadata, states = container.read_checkpoint(tmp_path)
    assert metadata == {"seed": 1}
    restored = torch.nn.BatchNorm1d(3)
    restored.load_state_dict(states["norm"])
    assert states["norm"]["num_batches_tracked"].dtype == torch.long
