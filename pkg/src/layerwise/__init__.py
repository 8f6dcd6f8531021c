"""Layered radiance fields for clothed-figure generation.

The body and every garment are separate radiance fields composed along
each ray by transmittance-based stratification, trained progressively
from the innermost layer outward with score-distillation guidance.
"""

from .config import RegWeights, TermWeights, TrainConfig, preset
from .field import GridSpec, MlpSpec, RadianceField, field_eval, field_eval_batch, hash_encode, init_field
from .render import (
    LayerStack,
    RenderedImage,
    assign_layers,
    cloth_only_render,
    compose_render,
    compose_render_max_baseline,
    partition,
    render_image,
    sample_ray,
    transmittance,
    volume_render,
)
from .scene import SceneConfig, default_scene, derive_prompts, load_scene, project_skeleton, sample_camera

__version__ = "0.1.0"
