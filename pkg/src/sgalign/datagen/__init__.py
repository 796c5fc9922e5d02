"""Synthetic scenes, sub-scan pairs and predicted-data simulation."""

from .corpus import Manifest, ManifestEntry, generate_corpus, split_of
from .pairs import (
    NoiseConfig,
    ScenePair,
    make_negative_pair,
    make_pair,
    pair_identity,
    propagate_annotations,
    random_transform,
    simulate_predicted,
    split_sizes,
)
from .scenes import (
    COLORS,
    MATERIALS,
    RELATIONS,
    SyntheticSceneConfig,
    box_iou,
    generate_scene,
    relation_holds,
    resolve_referral,
)
from .shapes import SHAPES, ShapeSpec, box, cylinder, sphere
