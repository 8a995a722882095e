"""
Interventional training: a confounder dictionary built from training-set bag
embeddings and a classifier that adjusts for it.

For a bag embedding B the head attends over the K dictionary strata,

    alpha = softmax((B W1) (C W2)^T / sqrt(d_p))

forms the prior-weighted stratum mix ``sum_i alpha_i P(c_i) c_i`` and
classifies the concatenation of B and that mix with a one-hidden-layer network.
The backbone that produced B stays frozen; only the head trains. With
``balance_strata`` the stage-3 loss is reweighted so that every occupied
(stratum, label) cell carries the same total weight.

GMIC layout, little-endian::

    magic    4 bytes  b"GMIC"
    version  u16      1
    K        u32
    d_B      u32
    strata   K x d_B f64
    priors   K f64
    hash     32 bytes, sha256 of the backbone parameters
    pca      u32 components, then mean (d_B f64), components (d_B x n f64)
             and explained-variance ratios (n f64)
"""

from __future__ import annotations

import logging

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from numpy.typing import ArrayLike
from numpy.typing import NDArray

from graph_mil._autodiff import Matrix
from graph_mil._autodiff import Node
from graph_mil._autodiff import Parameter
from graph_mil._autodiff import add
from graph_mil._autodiff import bce_loss
from graph_mil._autodiff import concat_cols
from graph_mil._autodiff import constant
from graph_mil._autodiff import elementwise
from graph_mil._autodiff import mul
from graph_mil._autodiff import no_grad
from graph_mil._autodiff import scale
from graph_mil._autodiff import softmax_rows
from graph_mil._binary import U32
from graph_mil._binary import ByteReader
from graph_mil._binary import pack_header
from graph_mil._clustering import PcaBasis
from graph_mil._clustering import assign_nearest
from graph_mil._clustering import kmeans
from graph_mil._clustering import pca_fit_transform
from graph_mil._config import TrainConfig
from graph_mil._config import derive_seed
from graph_mil._errors import FormatErrorCode
from graph_mil._errors import GraphMilFormatError
from graph_mil._errors import GraphMilInterventionError
from graph_mil._errors import GraphMilShapeError
from graph_mil._gnn import glorot
from graph_mil._optim import AdamState
from graph_mil._optim import Optimizer
from graph_mil._optim import ParamGroup
from graph_mil._training import TrainingHistory
from graph_mil._training import fit_loop


logger = logging.getLogger(__name__)

DICTIONARY_MAGIC = b"GMIC"
DICTIONARY_VERSION = 1
DICTIONARY_SUFFIX = ".gmic"
HASH_BYTES = 32


@dataclass(frozen=True, eq=False)
class ConfounderDictionary:
    strata: Matrix
    priors: NDArray[np.float64]
    pca: PcaBasis
    model_hash: str

    def __post_init__(self) -> None:
        strata = np.atleast_2d(np.asarray(self.strata, dtype=np.float64))
        priors = np.asarray(self.priors, dtype=np.float64).ravel()
        if priors.shape[0] != strata.shape[0]:
            raise GraphMilShapeError(
                f"{strata.shape[0]} strata but {priors.shape[0]} priors."
            )
        if (priors < 0).any() or abs(priors.sum() - 1.0) > 1e-9:
            raise GraphMilShapeError("Confounder priors must be a distribution.")
        if len(bytes.fromhex(self.model_hash)) != HASH_BYTES:
            raise GraphMilShapeError("model_hash must be a sha256 hex digest.")
        object.__setattr__(self, "strata", strata)
        object.__setattr__(self, "priors", priors)

    @property
    def k(self) -> int:
        return int(self.strata.shape[0])

    @property
    def embedding_dim(self) -> int:
        return int(self.strata.shape[1])


def build_confounder_dictionary(
    embeddings: ArrayLike,
    k: int,
    pca_dim: int,
    seed: int,
    model_hash: str,
    uniform_priors: bool = False,
) -> ConfounderDictionary:
    """
    Cluster training bag embeddings in PCA space and average each cluster in the
    original space. ``pca_dim`` is capped at min(N_t, d_B).
    """
    data = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n_train, d_b = data.shape
    if n_train < k:
        raise GraphMilInterventionError(
            f"Confounder dictionary needs at least K={k} embeddings, got {n_train}."
        )
    width = min(pca_dim, n_train, d_b)
    basis, reduced = pca_fit_transform(data, width)
    result = kmeans(reduced, k, derive_seed(seed, "confounders"))

    counts = np.bincount(result.assignments, minlength=k)
    if (counts == 0).any():
        raise GraphMilInterventionError("A confounder stratum has no members.")
    strata = np.vstack([data[result.assignments == i].mean(axis=0) for i in range(k)])
    priors = np.full(k, 1.0 / k) if uniform_priors else counts / n_train
    logger.debug("Confounder dictionary: K=%d, pca=%d, sizes=%s", k, width, counts)
    return ConfounderDictionary(
        strata=strata, priors=priors, pca=basis, model_hash=model_hash
    )


def stratum_assignments(
    embeddings: ArrayLike, dictionary: ConfounderDictionary
) -> NDArray[np.int64]:
    """Nearest stratum of every embedding, measured in the dictionary's PCA space."""
    reduced = dictionary.pca.transform(embeddings)
    centers = dictionary.pca.transform(dictionary.strata)
    assignments, _ = assign_nearest(reduced, centers)
    return assignments


def stratum_label_weights(
    assignments: ArrayLike, labels: Sequence[int]
) -> NDArray[np.float64]:
    """Per-bag loss weights; every occupied (stratum, label) cell sums to N / cells."""
    strata = np.asarray(assignments, dtype=np.int64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if strata.shape != y.shape:
        raise GraphMilShapeError(
            f"{strata.shape[0]} stratum assignments but {y.shape[0]} labels."
        )
    _, cell, counts = np.unique(
        np.stack([strata, y], axis=1), axis=0, return_inverse=True, return_counts=True
    )
    cell = cell.ravel()
    return strata.shape[0] / (counts.shape[0] * counts[cell].astype(np.float64))


@dataclass(eq=False)
class InterventionHead:
    w1: Parameter
    w2: Parameter
    hidden_weight: Parameter
    hidden_bias: Parameter
    out_weight: Parameter
    out_bias: Parameter

    @classmethod
    def initialize(
        cls, d_b: int, projection_dim: int, rng: np.random.Generator
    ) -> InterventionHead:
        return cls(
            w1=Parameter("intervention.w1", glorot(rng, d_b, projection_dim)),
            w2=Parameter("intervention.w2", glorot(rng, d_b, projection_dim)),
            hidden_weight=Parameter(
                "intervention.hidden.weight", glorot(rng, 2 * d_b, d_b)
            ),
            hidden_bias=Parameter("intervention.hidden.bias", np.zeros((1, d_b))),
            out_weight=Parameter("intervention.out.weight", glorot(rng, d_b, 1)),
            out_bias=Parameter("intervention.out.bias", np.zeros((1, 1))),
        )

    @property
    def projection_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> list[Parameter]:
        return [
            self.w1,
            self.w2,
            self.hidden_weight,
            self.hidden_bias,
            self.out_weight,
            self.out_bias,
        ]

    def state(self) -> dict[str, Matrix]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, Matrix]) -> None:
        for param in self.parameters():
            param.value = np.asarray(state[param.name], dtype=np.float64).copy()


def _check_embedding(
    b: Node, dictionary: ConfounderDictionary, head: InterventionHead
) -> None:
    width = head.embedding_dim
    if b.shape != (1, width) or dictionary.embedding_dim != width:
        raise GraphMilShapeError(
            f"Bag embedding {b.shape}, dictionary width {dictionary.embedding_dim} "
            f"and head width {head.embedding_dim} disagree."
        )


def confounder_attention(
    b: Node, dictionary: ConfounderDictionary, head: InterventionHead
) -> Node:
    """1 x K attention of a bag embedding over the dictionary strata."""
    _check_embedding(b, dictionary, head)
    query = b @ head.w1
    keys = constant(dictionary.strata) @ head.w2
    return softmax_rows(scale(query @ keys.T, 1.0 / np.sqrt(head.projection_dim)))


def backdoor_forward(
    b: Node, dictionary: ConfounderDictionary, head: InterventionHead
) -> tuple[Node, Node]:
    """Return the adjusted bag probability and the attention over strata."""
    alpha = confounder_attention(b, dictionary, head)
    weights = mul(alpha, constant(dictionary.priors.reshape(1, -1)))
    mixture = weights @ constant(dictionary.strata)
    z = concat_cols(b, mixture)
    hidden = elementwise("relu", add(z @ head.hidden_weight, head.hidden_bias))
    logit = add(hidden @ head.out_weight, head.out_bias)
    return elementwise("sigmoid", logit), alpha


def train_stage3(
    embeddings: Matrix,
    labels: Sequence[int],
    dictionary: ConfounderDictionary,
    head: InterventionHead,
    config: TrainConfig,
    model_hash: str,
    seed: int,
) -> TrainingHistory:
    """
    Train only the intervention head on embeddings from the frozen backbone.

    ``model_hash`` is the fingerprint of the backbone the embeddings came from;
    it must match the dictionary's.
    """
    if dictionary.model_hash != model_hash:
        raise GraphMilInterventionError(
            "Confounder dictionary was built from a different model "
            f"({dictionary.model_hash[:12]} != {model_hash[:12]})."
        )
    data = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if data.shape[0] != len(labels):
        raise GraphMilShapeError(
            f"{data.shape[0]} embeddings but {len(labels)} labels."
        )

    optimizer = Optimizer(
        [ParamGroup(head.parameters(), AdamState(config.lr_mil, config.wd_mil))]
    )
    rows = [constant(data[i : i + 1]) for i in range(data.shape[0])]
    if config.balance_strata:
        weights = stratum_label_weights(stratum_assignments(data, dictionary), labels)
    else:
        weights = np.ones(data.shape[0])

    def loss_fn(index: int) -> Node:
        prediction, _ = backdoor_forward(rows[index], dictionary, head)
        return scale(bce_loss(prediction, [[labels[index]]]), float(weights[index]))

    history = fit_loop(
        len(rows),
        loss_fn,
        optimizer,
        config.epochs,
        config.accumulation,
        seed,
        "stage3",
    )
    logger.info(
        "stage 3: K=%d, %d bags, final loss %.4f",
        dictionary.k,
        len(rows),
        history.final_loss,
    )
    return history


def predict_intervened(
    embeddings: Matrix, dictionary: ConfounderDictionary, head: InterventionHead
) -> NDArray[np.float64]:
    data = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    with no_grad():
        return np.array(
            [
                backdoor_forward(constant(row[None, :]), dictionary, head)[0].item()
                for row in data
            ]
        )


def encode_dictionary(dictionary: ConfounderDictionary) -> bytes:
    pca = dictionary.pca
    parts = [
        pack_header(DICTIONARY_MAGIC, DICTIONARY_VERSION),
        U32.pack(dictionary.k),
        U32.pack(dictionary.embedding_dim),
        dictionary.strata.astype("<f8").tobytes(),
        dictionary.priors.astype("<f8").tobytes(),
        bytes.fromhex(dictionary.model_hash),
        U32.pack(pca.n_components),
        pca.mean.astype("<f8").tobytes(),
        pca.components.astype("<f8").tobytes(),
        pca.explained_variance_ratio.astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def decode_dictionary(
    buffer: bytes, source: str = "<dictionary>"
) -> ConfounderDictionary:
    reader = ByteReader(buffer, source)
    reader.header(DICTIONARY_MAGIC, DICTIONARY_VERSION)
    k = reader.u32("K")
    d_b = reader.u32("d_B")
    strata = reader.array((k, d_b), "<f8", "strata")
    priors = reader.array((k,), "<f8", "priors")
    model_hash = reader.take(HASH_BYTES, "model hash").hex()
    n_components = reader.u32("PCA components")
    mean = reader.array((d_b,), "<f8", "PCA mean")
    components = reader.array((d_b, n_components), "<f8", "PCA components")
    ratios = reader.array((n_components,), "<f8", "PCA variance ratios")
    reader.finish()
    if (priors < 0).any() or abs(priors.sum() - 1.0) > 1e-9:
        raise GraphMilFormatError(
            FormatErrorCode.CORRUPT, f"{source}: priors do not form a distribution."
        )
    return ConfounderDictionary(
        strata=strata,
        priors=priors,
        pca=PcaBasis(mean=mean, components=components, explained_variance_ratio=ratios),
        model_hash=model_hash,
    )


def save_dictionary(dictionary: ConfounderDictionary, path: str | Path) -> Path:
    target = Path(path)
    target.write_bytes(encode_dictionary(dictionary))
    return target


def load_dictionary(path: str | Path) -> ConfounderDictionary:
    source = Path(path)
    return decode_dictionary(source.read_bytes(), source=str(source))
