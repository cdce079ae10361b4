"""Region referring and grounding toolkit."""

from .featmap import FeatureMap, bilinear, load_fmap, save_fmap, synth_feature_map
from .geometry import (
    BinaryMask,
    Box,
    MaskRegion,
    Point,
    Polygon,
    Scribble,
    bounding_box,
    iou,
    rasterize,
    region_from_json,
    region_to_json,
)
from .grounding import (
    GroundedText,
    Span,
    bench_ratio,
    eval_grounded_caption,
    eval_phrase_grounding,
    eval_pope,
    eval_rec,
    eval_refer,
    match_refer_answer,
    parse_grounded_text,
)
from .quantizer import (
    FEATURE_PLACEHOLDER,
    HybridRegionToken,
    QuantizerConfig,
    dequantize,
    encode_region_text,
    quantize,
)
from .sampler import (
    PointSet,
    SamplerConfig,
    SamplerParams,
    fps,
    init_params,
    knn,
    sample_positive_points,
    sampler_backward,
    sampler_forward,
)

__version__ = "0.1.0"
