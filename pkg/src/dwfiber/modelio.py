"""Trained-model directories: manifest.json + weights.bin (+ dictionary.json)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dwfiber.mlp import ACTIVATIONS, MlpModel
from dwfiber.synth import FLATTEN_ORDER

MODEL_FORMAT = 1
MODES = ("voxel", "neighborhood")


class ModelFormatError(ValueError):
    pass


@dataclass
class ModelManifest:
    layer_dims: list
    hidden_activation: str
    output_activation: str
    dropout_rate: float
    protocol_hash: str
    dictionary_m: int
    mode: str = "voxel"
    flatten_order: str = FLATTEN_ORDER
    format: int = MODEL_FORMAT
    extra: dict = field(default_factory=dict)  # training config, dataset digest, ...

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ModelFormatError(f"bad layer_dims {self.layer_dims}")
        for tag in (self.hidden_activation, self.output_activation):
            if tag not in ACTIVATIONS:
                raise ModelFormatError(f"unknown activation tag {tag!r}")
        if self.mode not in MODES:
            raise ModelFormatError(f"unknown mode {self.mode!r}")
        if self.layer_dims[-1] != self.dictionary_m:
            raise ModelFormatError(f"output width {self.layer_dims[-1]} != dictionary_m {self.dictionary_m}")
        if self.mode == "neighborhood" and self.layer_dims[0] % 27:
            raise ModelFormatError(f"neighborhood input width {self.layer_dims[0]} is not a multiple of 27")

    @property
    def n_signals(self) -> int:
        """Per-voxel signal length the model expects."""
        return self.layer_dims[0] // 27 if self.mode == "neighborhood" else self.layer_dims[0]

    @classmethod
    def for_model(cls, model: MlpModel, protocol_hash: str, mode: str = "voxel", **extra) -> "ModelManifest":
        return cls(model.layer_dims, model.hidden_activation, model.output_activation, model.dropout_rate,
                   protocol_hash, model.layer_dims[-1], mode, extra=extra)


def save_model(model: MlpModel, manifest: ModelManifest, dir_path, dictionary=None) -> Path:
    if list(model.layer_dims) != manifest.layer_dims:
        raise ModelFormatError(f"model dims {model.layer_dims} differ from manifest {manifest.layer_dims}")
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "weights.bin").open("wb") as fh:
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True))
    if dictionary is not None:
        dictionary.to_json(out / "dictionary.json")
    return out


def load_manifest(dir_path) -> ModelManifest:
    path = Path(dir_path) / "manifest.json"
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    if raw.get("format", MODEL_FORMAT) != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: unsupported model format {raw.get('format')}")
    try:
        return ModelManifest(**raw)
    except TypeError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc


def load_model(dir_path):
    """Returns (MlpModel with float32 weights, ModelManifest)."""
    manifest = load_manifest(dir_path)
    blob = np.fromfile(Path(dir_path) / "weights.bin", dtype="<f4")
    dims = manifest.layer_dims
    weights, biases, offset = [], [], 0
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        for what, shape in (("weights", (fan_out, fan_in)), ("bias", (fan_out,))):
            size = int(np.prod(shape))
            if offset + size > blob.size:
                raise ModelFormatError(f"weights.bin too short in layer {i} {what}: need {size} floats at "
                                       f"offset {offset}, blob has {blob.size}")
            arr = blob[offset : offset + size].reshape(shape).astype(np.float32)
            (weights if what == "weights" else biases).append(arr)
            offset += size
    if offset != blob.size:
        raise ModelFormatError(f"weights.bin has {blob.size - offset} trailing floats after the last layer")
    acts = [manifest.hidden_activation] * (len(dims) - 2) + [manifest.output_activation]
    return MlpModel(weights, biases, acts, manifest.dropout_rate), manifest
