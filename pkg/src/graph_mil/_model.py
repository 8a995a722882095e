"""
The trainable model behind every configuration: an optional instance encoder
(plain MIL), an optional GNN stack and one aggregator, plus the GMIP checkpoint
format.

GMIP layout, little-endian::

    magic    4 bytes  b"GMIP"
    version  u16      1
    config   u32 length + UTF-8 JSON of the TrainConfig
    F        u32      input feature dimension
    count    u32      number of tensors
    tensors  count x (u16 name length + UTF-8 name, u32 rows, u32 cols, f64 data)

Model parameters come first in model order; any extra named tensors (fitted
region centroids, intervention head weights) follow.
"""

from __future__ import annotations

import hashlib
import logging

from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np

from pydantic import ValidationError

from graph_mil._autodiff import Matrix
from graph_mil._autodiff import Parameter
from graph_mil._autodiff import elementwise
from graph_mil._autodiff import no_grad
from graph_mil._binary import U32
from graph_mil._binary import ByteReader
from graph_mil._binary import pack_header
from graph_mil._binary import pack_matrix
from graph_mil._binary import pack_text
from graph_mil._config import TrainConfig
from graph_mil._config import derive_seed
from graph_mil._errors import FormatErrorCode
from graph_mil._errors import GraphMilFormatError
from graph_mil._errors import GraphMilShapeError
from graph_mil._gnn import DenseLayer
from graph_mil._gnn import GnnStack
from graph_mil._gnn import GraphInputs
from graph_mil._gnn import dense_forward
from graph_mil._gnn import stack_forward
from graph_mil._mil import AbmilParams
from graph_mil._mil import BagOutput
from graph_mil._mil import DsmilParams
from graph_mil._mil import LinearHead
from graph_mil._mil import abmil_pool
from graph_mil._mil import dsmil_forward
from graph_mil._mil import head_logit
from graph_mil._optim import AdamState
from graph_mil._optim import ParamGroup


logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GMIP"
CHECKPOINT_VERSION = 1
CHECKPOINT_SUFFIX = ".gmip"


@dataclass(eq=False)
class ReadoutParams:
    head: LinearHead

    def parameters(self) -> list[Parameter]:
        return self.head.parameters()


Aggregator = AbmilParams | DsmilParams | ReadoutParams


@dataclass(eq=False)
class GraphMilModel:
    config: TrainConfig
    input_dim: int
    aggregator: Aggregator
    encoder: DenseLayer | None = None
    gnn: GnnStack | None = None

    @classmethod
    def initialize(
        cls, config: TrainConfig, input_dim: int, seed: int
    ) -> GraphMilModel:
        rng = np.random.default_rng(derive_seed(seed, "init"))
        hidden = config.hidden_dim
        encoder = None
        gnn = None
        if config.gnn_kind == "none":
            encoder = DenseLayer.initialize("encoder", input_dim, hidden, rng)
        else:
            readout = config.readout if config.aggregator == "readout" else "none"
            gnn = GnnStack.initialize(
                config.gnn_kind, input_dim, hidden, config.layers, rng, readout
            )

        aggregator: Aggregator
        if config.aggregator == "abmil":
            aggregator = AbmilParams.initialize(hidden, config.attention_dim, rng)
        elif config.aggregator == "dsmil":
            aggregator = DsmilParams.initialize(hidden, config.query_dim, rng)
        else:
            aggregator = ReadoutParams(LinearHead.initialize("mil.head", hidden, rng))
        return cls(config, input_dim, aggregator, encoder, gnn)

    @property
    def name(self) -> str:
        return self.config.model_name

    @property
    def embedding_dim(self) -> int:
        return self.config.hidden_dim

    def gnn_parameters(self) -> list[Parameter]:
        return [] if self.gnn is None else self.gnn.parameters()

    def mil_parameters(self) -> list[Parameter]:
        encoder = [] if self.encoder is None else self.encoder.parameters()
        return encoder + self.aggregator.parameters()

    def parameters(self) -> list[Parameter]:
        return self.gnn_parameters() + self.mil_parameters()

    def parameter_groups(self) -> list[ParamGroup]:
        """GNN layers train at lr_gnn/wd_gnn, everything else at lr_mil/wd_mil."""
        cfg = self.config
        groups = []
        if self.gnn is not None:
            groups.append(
                ParamGroup(
                    self.gnn_parameters(), AdamState(cfg.lr_gnn, cfg.wd_gnn)
                )
            )
        groups.append(
            ParamGroup(self.mil_parameters(), AdamState(cfg.lr_mil, cfg.wd_mil))
        )
        return groups

    def forward(self, inputs: GraphInputs) -> BagOutput:
        if inputs.features.shape[1] != self.input_dim:
            raise GraphMilShapeError(
                f"Graph '{inputs.graph.slide_id}' has {inputs.features.shape[1]}-d "
                f"features, model expects {self.input_dim}."
            )
        h = inputs.features
        if self.encoder is not None:
            h = dense_forward(self.encoder, h)

        if isinstance(self.aggregator, ReadoutParams):
            assert self.gnn is not None
            vector = stack_forward(self.gnn, inputs, h)
            prediction = elementwise(
                "sigmoid", head_logit(self.aggregator.head, vector)
            )
            return BagOutput(embedding=vector, prediction=prediction)

        if self.gnn is not None:
            h = stack_forward(self.gnn, inputs, h)
        if isinstance(self.aggregator, AbmilParams):
            return abmil_pool(h, self.aggregator)
        return dsmil_forward(h, self.aggregator)

    def predict(self, inputs: GraphInputs) -> BagOutput:
        with no_grad():
            return self.forward(inputs)

    def state(self) -> dict[str, Matrix]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, Matrix]) -> None:
        for param in self.parameters():
            if param.name not in state:
                raise GraphMilFormatError(
                    FormatErrorCode.CORRUPT, f"Checkpoint lacks tensor '{param.name}'."
                )
            value = np.asarray(state[param.name], dtype=np.float64)
            if value.shape != param.shape:
                raise GraphMilFormatError(
                    FormatErrorCode.CORRUPT,
                    f"Tensor '{param.name}' has shape {value.shape}, "
                    f"model expects {param.shape}.",
                )
            param.value = value.copy()
            param.zero_grad()

    def fingerprint(self) -> str:
        """sha256 over parameter names, shapes and bytes."""
        digest = hashlib.sha256()
        for param in self.parameters():
            digest.update(param.name.encode("utf-8"))
            digest.update(np.asarray(param.shape, dtype="<i8").tobytes())
            digest.update(param.value.astype("<f8").tobytes())
        return digest.hexdigest()


@dataclass
class Checkpoint:
    model: GraphMilModel
    extras: dict[str, Matrix] = field(default_factory=dict)


def encode_checkpoint(
    model: GraphMilModel, extras: dict[str, Matrix] | None = None
) -> bytes:
    tensors = list(model.state().items()) + list((extras or {}).items())
    names = [name for name, _ in tensors]
    if len(set(names)) != len(names):
        raise GraphMilShapeError("Checkpoint tensor names must be unique.")

    parts = [
        pack_header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION),
        pack_text(model.config.model_dump_json(), length=U32),
        U32.pack(model.input_dim),
        U32.pack(len(tensors)),
    ]
    for name, value in tensors:
        parts.append(pack_text(name))
        parts.append(pack_matrix(value))
    return b"".join(parts)


def save_checkpoint(
    model: GraphMilModel, path: str | Path, extras: dict[str, Matrix] | None = None
) -> Path:
    target = Path(path)
    target.write_bytes(encode_checkpoint(model, extras))
    logger.debug("Wrote checkpoint %s", target)
    return target


def decode_checkpoint(buffer: bytes, source: str = "<checkpoint>") -> Checkpoint:
    reader = ByteReader(buffer, source)
    reader.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    config_json = reader.text("config", length=U32)
    try:
        config = TrainConfig.model_validate_json(config_json)
    except ValidationError as e:
        raise GraphMilFormatError(
            FormatErrorCode.CORRUPT, f"{source}: invalid config header: {e}"
        ) from e
    input_dim = reader.u32("input dimension")
    count = reader.u32("tensor count")
    tensors = {}
    for index in range(count):
        name = reader.text(f"tensor {index} name")
        tensors[name] = reader.matrix(f"tensor '{name}'")
    reader.finish()

    model = GraphMilModel.initialize(config, input_dim, seed=config.seed)
    model.load_state(tensors)
    own = {p.name for p in model.parameters()}
    extras = {name: value for name, value in tensors.items() if name not in own}
    return Checkpoint(model=model, extras=extras)


def load_checkpoint(path: str | Path) -> Checkpoint:
    source = Path(path)
    return decode_checkpoint(source.read_bytes(), source=str(source))
