"""Model files and numeric tables.

Models are stored as a single self-describing JSON document validated by the
pydantic schemas below. Floats are written in their shortest round-trip
decimal form, so ``load_model(save_model(m))`` reproduces ``m`` bit for bit.
Tables are CSV written by pandas at 17 significant digits, preceded by a
``# key=value`` provenance line.
"""

from pathlib import Path
from typing import Annotated, Any, Literal, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from estimation.model import EiBrainModel, NetworkModel, Nonlinearity

FLOAT_FORMAT = "%.17g"


class NetworkModelFile(BaseModel):
    family: Literal["network"] = "network"
    n: int
    a_matrix: list[list[float]]
    b_matrix: list[list[float]]
    offset: list[float]
    gain: list[float]
    bias: list[float]
    nonlinearity: Nonlinearity
    free_mask: list[list[bool]]
    trainable: list[str]

    @classmethod
    def from_model(cls, model: NetworkModel) -> "NetworkModelFile":
        return cls(
            n=model.n_states,
            a_matrix=model.a_matrix.tolist(),
            b_matrix=model.b_matrix.tolist(),
            offset=model.offset.tolist(),
            gain=model.gain.tolist(),
            bias=model.bias.tolist(),
            nonlinearity=model.nonlinearity,
            free_mask=model.free_mask.tolist(),
            trainable=list(model.trainable),
        )

    def to_model(self) -> NetworkModel:
        return NetworkModel(
            a_matrix=np.array(self.a_matrix, dtype=float).reshape(self.n, self.n),
            b_matrix=np.array(self.b_matrix, dtype=float).reshape(self.n, self.n),
            offset=np.array(self.offset, dtype=float),
            gain=np.array(self.gain, dtype=float),
            nonlinearity=self.nonlinearity,
            free_mask=np.array(self.free_mask, dtype=bool).reshape(self.n, self.n),
            bias=np.array(self.bias, dtype=float),
            trainable=tuple(self.trainable),
        )


class EiModelFile(BaseModel):
    family: Literal["ei"] = "ei"
    n_regions: int
    w_p: list[list[float]]
    w_r: list[list[float]]
    j_p: list[float]
    j_r: list[float]
    tau_p: list[float]
    tau_r: list[float]
    gain: list[float]
    offset: list[float]
    trainable: list[str]

    @classmethod
    def from_model(cls, model: EiBrainModel) -> "EiModelFile":
        return cls(
            n_regions=model.n_regions,
            w_p=model.w_p.tolist(),
            w_r=model.w_r.tolist(),
            j_p=model.j_p.tolist(),
            j_r=model.j_r.tolist(),
            tau_p=model.tau_p.tolist(),
            tau_r=model.tau_r.tolist(),
            gain=model.gain.tolist(),
            offset=model.offset.tolist(),
            trainable=list(model.trainable),
        )

    def to_model(self) -> EiBrainModel:
        n = self.n_regions
        return EiBrainModel(
            w_p=np.array(self.w_p, dtype=float).reshape(n, n),
            w_r=np.array(self.w_r, dtype=float).reshape(n, n),
            j_p=np.array(self.j_p),
            j_r=np.array(self.j_r),
            tau_p=np.array(self.tau_p),
            tau_r=np.array(self.tau_r),
            gain=np.array(self.gain),
            offset=np.array(self.offset),
            trainable=tuple(self.trainable),
        )


class ModelFile(BaseModel):
    model: Annotated[Union[NetworkModelFile, EiModelFile], Field(discriminator="family")]
    metadata: dict[str, Any] = Field(default_factory=dict)


def model_to_json(model, metadata: dict | None = None) -> str:
    if isinstance(model, NetworkModel):
        body = NetworkModelFile.from_model(model)
    elif isinstance(model, EiBrainModel):
        body = EiModelFile.from_model(model)
    else:
        raise TypeError(f"Cannot serialize model of type {type(model).__name__}")
    return ModelFile(model=body, metadata=metadata or {}).model_dump_json(indent=2)


def save_model(model, path: str | Path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model_to_json(model, metadata))
    return path


def load_model(path: str | Path):
    return ModelFile.model_validate_json(Path(path).read_text()).model.to_model()


def load_model_metadata(path: str | Path) -> dict:
    return ModelFile.model_validate_json(Path(path).read_text()).metadata


def provenance_line(provenance: dict | None) -> str:
    if not provenance:
        return ""
    return "# " + " ".join(f"{key}={value}" for key, value in provenance.items()) + "\n"


def write_table(frame: pd.DataFrame, path: str | Path, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(provenance_line(provenance))
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_array(array: np.ndarray, path: str | Path, prefix: str, provenance: dict | None = None) -> Path:
    array = np.atleast_2d(np.asarray(array, dtype=float))
    frame = pd.DataFrame(array, columns=[f"{prefix}{i}" for i in range(array.shape[1])])
    return write_table(frame, path, provenance)


def read_table(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", float_precision="round_trip")


def read_array(path: str | Path) -> np.ndarray:
    return read_table(path).to_numpy(dtype=float)
