"""Binary persistence for datasets and model checkpoints.

Container layout (all integers little-endian):

    bytes 0..7    magic ``b"TREEREG1"``
    bytes 8..11   uint32 header length H
    bytes 12..    H bytes of UTF-8 JSON header
    then          raw array payloads, back to back, in header order

The JSON header carries a ``format`` tag, format-specific metadata, and an
``arrays`` list of ``{"name", "dtype", "shape"}`` records describing the
payloads. Floats are stored as little-endian 64-bit (``<f8``), labels as
little-endian 32-bit integers (``<i4``), all row-major.

Dataset files (``format: "multi-env-dataset"``) embed the generating config
and the environment tree's edge-list text, so a dataset file alone is enough
to train on. Arrays, in order: x ``<f8`` (n, d_x); z ``<f8`` (n, k);
y ``<f8`` (n,); env_ids ``<i4`` (n,); split ``<i4`` (n,).

Checkpoint files (``format: "model-checkpoint"``) record the model kind,
architecture, penalty weight, tree hash and an optional run id, followed by
the parameter tensors in documented order: w1, b1, w2, b2, w3, b3, then
w0 and delta for the tree model or w for the baseline.
"""
from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .env_tree import EnvTree, parse_edge_list_text
from .model import BaselineParams, TbrParams
from .numerics import EncoderParams
from .simulator import MultiEnvDataset, SimConfig

MAGIC = b"TREEREG1"

_ALLOWED_DTYPES = {"<f8", "<i4"}


def write_container(path, header: dict, arrays: Mapping[str, np.ndarray]) -> None:
    """Write a header + named arrays; array order in `header["arrays"]` wins."""
    header = dict(header)
    records = []
    payload_arrays = []
    for name, arr in arrays.items():
        dtype = "<i4" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        arr = np.ascontiguousarray(arr, dtype=np.dtype(dtype))
        records.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payload_arrays.append(arr)
    header["arrays"] = records
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in payload_arrays:
            fh.write(arr.tobytes())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a treereg container (magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for rec in header["arrays"]:
            dtype = rec["dtype"]
            if dtype not in _ALLOWED_DTYPES:
                raise ValueError(f"{path}: unsupported dtype {dtype!r}")
            shape = tuple(rec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(count * np.dtype(dtype).itemsize)
            arrays[rec["name"]] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return header, arrays


# ----------------------------------------------------------------------
# Datasets
# ----------------------------------------------------------------------
def save_dataset(path, dataset: MultiEnvDataset, tree: EnvTree) -> None:
    header = {
        "format": "multi-env-dataset",
        "version": 1,
        "config": dataset.config.to_json_dict(),
        "tree_edges": tree.to_edge_list_text(),
        "observed_envs": list(dataset.observed_envs),
    }
    write_container(
        path,
        header,
        {
            "x": dataset.x,
            "z": dataset.z,
            "y": dataset.y,
            "env_ids": dataset.env_ids,
            "split": dataset.split,
        },
    )


def load_dataset(path) -> tuple[MultiEnvDataset, EnvTree]:
    header, arrays = read_container(path)
    if header.get("format") != "multi-env-dataset":
        raise ValueError(f"{path}: not a dataset file")
    tree = parse_edge_list_text(header["tree_edges"])
    dataset = MultiEnvDataset(
        x=arrays["x"],
        z=arrays["z"],
        y=arrays["y"],
        env_ids=arrays["env_ids"],
        split=arrays["split"],
        observed_envs=tuple(header["observed_envs"]),
        config=SimConfig.from_json_dict(header["config"]),
    )
    return dataset, tree


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------
def save_checkpoint(
    path,
    params: TbrParams | BaselineParams,
    tree: EnvTree,
    lam: float,
    meta: dict | None = None,
) -> None:
    enc = params.encoder
    header = {
        "format": "model-checkpoint",
        "version": 1,
        "model_kind": "baseline" if isinstance(params, BaselineParams) else "tbr",
        "d_in": enc.d_in,
        "hidden": [enc.w1.shape[1], enc.w2.shape[1]],
        "k_hat": params.k_hat,
        "negative_slope": enc.negative_slope,
        "lam": lam,
        "tree_hash": tree.structure_hash(),
        "meta": meta or {},
    }
    arrays = {
        "w1": enc.w1, "b1": enc.b1, "w2": enc.w2,
        "b2": enc.b2, "w3": enc.w3, "b3": enc.b3,
    }
    if isinstance(params, BaselineParams):
        arrays["w"] = params.w
    else:
        arrays["w0"] = params.w0
        arrays["delta"] = params.delta
    write_container(path, header, arrays)


def load_checkpoint(path) -> tuple[TbrParams | BaselineParams, dict]:
    header, arrays = read_container(path)
    if header.get("format") != "model-checkpoint":
        raise ValueError(f"{path}: not a checkpoint file")
    enc = EncoderParams(
        w1=arrays["w1"], b1=arrays["b1"],
        w2=arrays["w2"], b2=arrays["b2"],
        w3=arrays["w3"], b3=arrays["b3"],
        negative_slope=header["negative_slope"],
    )
    if header["model_kind"] == "baseline":
        params: TbrParams | BaselineParams = BaselineParams(enc, arrays["w"])
    else:
        params = TbrParams(enc, arrays["w0"], arrays["delta"])
    return params, header
