"""Per-modality feature extractors."""

from .gat import GatEncoder, GatLayer, attention_mask, block_mask, encode_structure
from .pointnet import (
    POINT_RESOLUTION,
    PointEncoder,
    encode_mesh,
    encode_points,
    pad_cloud,
    prepare_mesh,
    prepare_points,
)
from .sampling import MESH_SAMPLES, canonicalize_points, fps, sample_mesh_surface, triangle_areas
from .text import (
    MissingEmbeddingError,
    TextEmbeddingProvider,
    TextProjection,
    embed_caption,
    embed_referrals,
    read_sgem,
    tokenize,
    write_sgem,
)
