"""Caption and referral features from a pluggable text embedding provider.

Two provider modes exist. ``toy-hash`` hashes lowercase unigrams and bigrams
into buckets and sums a fixed random vector per bucket; it needs no model
download and maps equal strings to equal vectors. ``precomputed`` serves
vectors produced by an external encoder, either attached to the nodes or
read from an SGEM file.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..numerics.layers import Linear
from ..scenegraph import ModalityKind, ObjectNode

TOY_DIM = 384
SGEM_MAGIC = b"SGEM"
_TOKEN = re.compile(r"[a-z0-9]+")


class MissingEmbeddingError(KeyError):
    pass


def tokenize(text: str) -> list[str]:
    words = _TOKEN.findall(text.lower())
    return words + [f"{a}_{b}" for a, b in zip(words, words[1:])]


@dataclass
class TextEmbeddingProvider:
    mode: str = "toy-hash"
    dim: int = TOY_DIM
    seed: int = 0
    buckets: int = 4096
    table: dict[tuple[int, int], list[np.ndarray]] = field(default_factory=dict)
    cache: bool = True
    _projection: np.ndarray | None = field(default=None, init=False, repr=False)
    _memo: dict[str, np.ndarray] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.mode not in ("toy-hash", "precomputed"):
            raise ValueError(f"unknown text provider mode {self.mode!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "TextEmbeddingProvider":
        dim, table = read_sgem(path)
        return cls(mode="precomputed", dim=dim, table=table)

    def _bucket(self, token: str) -> int:
        key = self.seed.to_bytes(8, "little", signed=False)
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
        return int.from_bytes(digest, "little") % self.buckets

    def encode(self, text: str) -> np.ndarray:
        """Toy-hash vector for ``text`` (unit norm unless the text has no tokens)."""
        if self.cache and text in self._memo:
            return self._memo[text]
        if self._projection is None:
            rng = np.random.default_rng(self.seed)
            self._projection = rng.standard_normal((self.buckets, self.dim)).astype(np.float32)
        tokens = tokenize(text)
        vec = np.zeros(self.dim, dtype=np.float32)
        for tok in tokens:
            vec += self._projection[self._bucket(tok)]
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        if self.cache:
            self._memo[text] = vec
        return vec

    def _lookup(self, node: ObjectNode, kind: ModalityKind) -> list[np.ndarray]:
        vecs = self.table.get((node.id, int(kind)))
        if not vecs:
            raise MissingEmbeddingError(f"no precomputed {kind.name} embedding for node id {node.id}")
        return vecs

    def caption_vector(self, node: ObjectNode) -> np.ndarray:
        if node.text_embedding is not None:
            return np.asarray(node.text_embedding, dtype=np.float32).reshape(-1)
        if self.mode == "precomputed":
            return np.asarray(self._lookup(node, ModalityKind.T)[0], dtype=np.float32)
        if not node.caption:
            raise ValueError(f"node {node.id} has no caption")
        return self.encode(node.caption)

    def referral_vectors(self, node: ObjectNode) -> np.ndarray:
        if node.referral_embeddings is not None and len(node.referral_embeddings):
            return np.asarray(node.referral_embeddings, dtype=np.float32).reshape(-1, self.dim)
        if self.mode == "precomputed":
            if not node.referrals and (node.id, int(ModalityKind.R)) not in self.table:
                return np.zeros((0, self.dim), dtype=np.float32)
            return np.stack(self._lookup(node, ModalityKind.R)).astype(np.float32)
        if not node.referrals:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self.encode(r) for r in node.referrals])

    def mean_referral(self, node: ObjectNode) -> np.ndarray | None:
        vecs = self.referral_vectors(node)
        return vecs.mean(axis=0) if len(vecs) else None


class TextProjection(Linear):
    """Trainable provider-dim -> feature-dim map shared by one text modality."""


def embed_caption(provider: TextEmbeddingProvider, params: TextProjection, node: ObjectNode) -> nx.Tensor:
    return params(nx.Tensor(provider.caption_vector(node)))


def embed_referrals(provider: TextEmbeddingProvider, params: TextProjection, node: ObjectNode) -> nx.Tensor | None:
    """Projected mean of the node's referral vectors; None when it has none."""
    mean = provider.mean_referral(node)
    return None if mean is None else params(nx.Tensor(mean))


# ------------------------------------------------------------------ SGEM I/O
def write_sgem(path: str | Path, dim: int, records: list[tuple[int, int, np.ndarray]]) -> None:
    """Records are (node id, modality code, vector)."""
    chunks = [SGEM_MAGIC, struct.pack("<II", dim, len(records))]
    for node_id, code, vec in records:
        vec = np.asarray(vec, dtype="<f4").reshape(-1)
        if vec.shape[0] != dim:
            raise ValueError(f"SGEM record for node {node_id} has dim {vec.shape[0]}, expected {dim}")
        chunks.append(struct.pack("<QB", node_id, code))
        chunks.append(vec.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_sgem(path: str | Path) -> tuple[int, dict[tuple[int, int], list[np.ndarray]]]:
    buf = Path(path).read_bytes()
    if buf[:4] != SGEM_MAGIC:
        raise ValueError(f"{path}: not an SGEM file")
    dim, count = struct.unpack_from("<II", buf, 4)
    pos = 12
    rec = 9 + 4 * dim
    if len(buf) < pos + count * rec:
        raise ValueError(f"{path}: truncated SGEM file")
    table: dict[tuple[int, int], list[np.ndarray]] = {}
    for _ in range(count):
        node_id, code = struct.unpack_from("<QB", buf, pos)
        vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos + 9).astype(np.float32)
        table.setdefault((node_id, code), []).append(vec)
        pos += rec
    return dim, table
