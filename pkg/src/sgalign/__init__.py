"""Cross-modal 3D scene-graph alignment on a small numpy autodiff kernel."""

from .scenegraph import (
    MODALITIES,
    Mesh,
    ModalityKind,
    ObjectNode,
    SceneGraph,
    ValidationError,
    load_scene_graph,
    save_scene_graph,
    structure_features,
)

__version__ = "0.1.0"
