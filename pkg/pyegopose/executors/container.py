import json
import logging
import pathlib
from typing import Any, Dict, List, Tuple

import numpy as np
import torch

from pyegopose.modules import digests, enums
from pyegopose.modules.exceptions import ConfigError, MissingArtifact
from pyegopose.modules.models import SCHEMA_VERSION
from pyegopose.modules.structures import (
    DatasetSplit,
    ImputedTrajectory,
    MotionSequence,
    Skeleton,
    SparseHands,
    TrackingSignal,
)

LOGGER = logging.getLogger("pyegopose")


def _storage_dtype(array: np.ndarray) -> np.dtype:
    """Little-endian storage type: float32 for values, uint8 for masks, int32 for indices."""
    if array.dtype == np.bool_:
        return np.dtype("|u1")
    if np.issubdtype(array.dtype, np.integer):
        return np.dtype("<i4")
    return np.dtype("<f4")


def write_container(
    directory: pathlib.Path, kind: str, arrays: Dict[str, np.ndarray], metadata: Dict[str, Any]
) -> str:
    """Writes raw arrays and their manifest into a directory.

    Args:
        directory: Target directory, created if absent.
        kind: Container kind recorded in the manifest.
        arrays: Named arrays.
        metadata: JSON-serializable metadata.

    Returns:
        str:
        SHA-256 digest of the written container.
    """
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, array in arrays.items():
        array = np.asarray(array)
        dtype = _storage_dtype(array)
        filename = f"{name}.bin"
        np.ascontiguousarray(array, dtype=dtype).tofile(directory / filename)
        index[name] = {"file": filename, "dtype": dtype.str, "shape": list(array.shape)}
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "metadata": metadata,
        "arrays": index,
    }
    with open(directory / enums.Artifacts.manifest, "w") as file:
        json.dump(manifest, file, indent=2, sort_keys=True)
        file.write("\n")
    return digests.container_digest(directory)


def read_container(
    directory: pathlib.Path, kind: str | None = None
) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Reads a container written by ``write_container``.

    Args:
        directory: Container directory.
        kind: Expected container kind, unchecked when ``None``.

    Returns:
        Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
        Metadata and named arrays.

    Raises:
        MissingArtifact:
        If the manifest or any array file is absent.
        ConfigError:
        On a kind or schema version mismatch.
    """
    directory = pathlib.Path(directory)
    manifest_path = directory / enums.Artifacts.manifest
    if not manifest_path.is_file():
        raise MissingArtifact([str(manifest_path)])
    with open(manifest_path) as file:
        manifest = json.load(file)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{manifest_path} has schema version {manifest.get('schema_version')}")
    if kind and manifest.get("kind") != kind:
        raise ConfigError(f"{directory} holds {manifest.get('kind')!r}, expected {kind!r}")
    missing = [
        str(directory / entry["file"])
        for entry in manifest["arrays"].values()
        if not (directory / entry["file"]).is_file()
    ]
    if missing:
        raise MissingArtifact(missing)
    arrays = {}
    for name, entry in manifest["arrays"].items():
        array = np.fromfile(directory / entry["file"], dtype=np.dtype(entry["dtype"]))
        array = array.reshape(entry["shape"])
        arrays[name] = array.astype(bool) if entry["dtype"] == "|u1" else array
    return manifest["metadata"], arrays


def skeleton_metadata(skeleton: Skeleton) -> Dict[str, Any]:
    """JSON form of a skeleton."""
    return {
        "names": skeleton.names,
        "parents": skeleton.parents,
        "offsets": skeleton.offsets.tolist(),
        "regions": [str(region) for region in skeleton.regions],
    }


def skeleton_from_metadata(metadata: Dict[str, Any]) -> Skeleton:
    """Rebuilds a skeleton stored by ``skeleton_metadata``."""
    return Skeleton(
        names=metadata["names"],
        parents=metadata["parents"],
        offsets=np.asarray(metadata["offsets"], dtype=np.float64),
        regions=[enums.Region(region) for region in metadata["regions"]],
    )


def write_dataset(directory: pathlib.Path, dataset: DatasetSplit, config: Dict[str, Any]) -> str:
    """Persists a dataset split.

    Args:
        directory: Split directory.
        dataset: Split to write.
        config: Data configuration recorded in the manifest.

    Returns:
        str:
        Container digest.
    """
    first = dataset.sequences[0]
    det_sequence = np.concatenate(
        [np.full(len(table), index, dtype=np.int32) for index, table in enumerate(dataset.detections)]
    )
    arrays = {
        "root": np.stack([seq.root for seq in dataset.sequences]),
        "rotations": np.stack([seq.rotations for seq in dataset.sequences]),
        "head": np.stack([signal.head for signal in dataset.signals]),
        "hands": np.stack([signal.hands for signal in dataset.signals]),
        "visibility": np.stack(dataset.masks).astype(bool),
        "det_sequence": det_sequence,
        "det_frame": np.concatenate([table.frames for table in dataset.detections]).astype(np.int32),
        "det_side": np.concatenate([table.sides for table in dataset.detections]).astype(np.int32),
        "det_values": np.concatenate([table.values for table in dataset.detections]),
    }
    metadata = {
        "split": str(dataset.split),
        "seeds": dataset.seeds,
        "config": config,
        "fps": first.fps,
        "frames": len(first),
        "joint_count": first.skeleton.joint_count,
        "head_dim": dataset.signals[0].head.shape[1],
        "hand_dim": dataset.signals[0].hand_dim,
        "skeleton": skeleton_metadata(first.skeleton),
    }
    return write_container(directory, "dataset", arrays, metadata)


def read_dataset(directory: pathlib.Path) -> DatasetSplit:
    """Loads a dataset split written by ``write_dataset``."""
    metadata, arrays = read_container(directory, "dataset")
    skeleton = skeleton_from_metadata(metadata["skeleton"])
    fps, frames = metadata["fps"], metadata["frames"]
    sequences, signals, masks, detections = [], [], [], []
    for index in range(len(metadata["seeds"])):
        sequences.append(
            MotionSequence(
                skeleton=skeleton, fps=fps, root=arrays["root"][index], rotations=arrays["rotations"][index]
            )
        )
        signals.append(TrackingSignal(head=arrays["head"][index], hands=arrays["hands"][index], fps=fps))
        masks.append(arrays["visibility"][index])
        rows = arrays["det_sequence"] == index
        detections.append(
            SparseHands(
                frame_count=frames,
                frames=arrays["det_frame"][rows],
                sides=arrays["det_side"][rows],
                values=arrays["det_values"][rows],
            )
        )
    return DatasetSplit(
        split=enums.Split(metadata["split"]),
        seeds=metadata["seeds"],
        sequences=sequences,
        signals=signals,
        masks=masks,
        detections=detections,
    )


def read_container_metadata(directory: pathlib.Path) -> Dict[str, Any]:
    """Manifest metadata without loading the arrays."""
    manifest_path = pathlib.Path(directory) / enums.Artifacts.manifest
    if not manifest_path.is_file():
        raise MissingArtifact([str(manifest_path)])
    with open(manifest_path) as file:
        return json.load(file)["metadata"]


def write_imputed(
    directory: pathlib.Path, seeds: List[int], trajectories: List[ImputedTrajectory], metadata: Dict[str, Any]
) -> str:
    """Persists the imputed trajectories of a split."""
    arrays = {
        "mean": np.stack([item.mean for item in trajectories]),
        "uncertainty": np.stack([item.uncertainty for item in trajectories]),
        "visibility": np.stack([item.visibility for item in trajectories]).astype(bool),
    }
    metadata = {**metadata, "seeds": seeds, "kind": str(trajectories[0].kind)}
    return write_container(directory, "imputed", arrays, metadata)


def read_imputed(directory: pathlib.Path) -> Tuple[Dict[str, Any], List[ImputedTrajectory]]:
    """Loads imputed trajectories written by ``write_imputed``."""
    metadata, arrays = read_container(directory, "imputed")
    kind = enums.UncertaintyKind(metadata["kind"])
    return metadata, [
        ImputedTrajectory(
            mean=arrays["mean"][index],
            uncertainty=arrays["uncertainty"][index],
            visibility=arrays["visibility"][index],
            kind=kind,
        )
        for index in range(len(metadata["seeds"]))
    ]


def write_predictions(
    directory: pathlib.Path,
    seeds: List[int],
    sequences: List[MotionSequence],
    variances: List[np.ndarray],
    metadata: Dict[str, Any],
) -> str:
    """Persists generated sequences with their per-frame variance across draws."""
    arrays = {
        "root": np.stack([seq.root for seq in sequences]),
        "rotations": np.stack([seq.rotations for seq in sequences]),
        "positions": np.stack([seq.positions for seq in sequences]),
        "variance": np.stack(variances),
    }
    metadata = {
        **metadata,
        "seeds": seeds,
        "fps": sequences[0].fps,
        "skeleton": skeleton_metadata(sequences[0].skeleton),
    }
    return write_container(directory, "predictions", arrays, metadata)


def read_predictions(
    directory: pathlib.Path,
) -> Tuple[Dict[str, Any], List[MotionSequence], List[np.ndarray]]:
    """Loads generated sequences written by ``write_predictions``."""
    metadata, arrays = read_container(directory, "predictions")
    skeleton = skeleton_from_metadata(metadata["skeleton"])
    sequences = [
        MotionSequence(
            skeleton=skeleton,
            fps=metadata["fps"],
            root=arrays["root"][index],
            rotations=arrays["rotations"][index],
            positions=arrays["positions"][index],
        )
        for index in range(len(metadata["seeds"]))
    ]
    return metadata, sequences, list(arrays["variance"])


def write_checkpoint(
    directory: pathlib.Path, modules: Dict[str, torch.nn.Module], metadata: Dict[str, Any]
) -> str:
    """Persists module state dicts as named raw arrays.

    Args:
        directory: Checkpoint directory.
        modules: Modules keyed by the prefix of their parameter names.
        metadata: Architecture, training configuration and seeds.

    Returns:
        str:
        Container digest.
    """
    arrays = {
        f"{prefix}.{name}": tensor.detach().cpu().numpy()
        for prefix, module in modules.items()
        for name, tensor in module.state_dict().items()
    }
    return write_container(directory, "checkpoint", arrays, metadata)


def read_checkpoint(directory: pathlib.Path) -> Tuple[Dict[str, Any], Dict[str, Dict[str, torch.Tensor]]]:
    """Loads a checkpoint into per-prefix state dicts.

    Returns:
        Tuple[Dict[str, Any], Dict[str, Dict[str, torch.Tensor]]]:
        Metadata and state dicts keyed by module prefix.
    """
    metadata, arrays = read_container(directory, "checkpoint")
    states: Dict[str, Dict[str, torch.Tensor]] = {}
    for key, array in arrays.items():
        prefix, name = key.split(".", 1)
        tensor = torch.from_numpy(np.ascontiguousarray(array))
        if tensor.dtype == torch.int32:
            tensor = tensor.long()
        states.setdefault(prefix, {})[name] = tensor
    return metadata, states
