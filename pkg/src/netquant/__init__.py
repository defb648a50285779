"""Codebook quantization and entropy coding for neural-network parameters.

The toolkit clusters a model's flat parameter vector into a small shared
codebook (optionally weighting errors by per-parameter loss curvature),
encodes the result with optimal prefix codes, and accounts for the exact
compressed size. A built-in multilayer perceptron supplies realistic
parameters, curvature estimates, and end-to-end accuracy numbers at desk
scale.
"""

from .params import (
    CURVATURE_FLOOR,
    ChecksumError,
    CurvatureDiag,
    CurvatureSource,
    DivergenceError,
    FormatError,
    Manifest,
    NetQuantError,
    ParamSet,
    PruneMask,
    Span,
    compact_unpruned,
    load_model,
    read_manifest,
    save_model,
)
from .quantizers import (
    ClusterConfig,
    Codebook,
    EcsqConfig,
    LambdaResult,
    QuantizeResult,
    compact_codebook,
    dequantize,
    ecsq_iterate,
    hw_distortion,
    hw_kmeans_lloyd,
    kmeans_lloyd,
    msqe,
    scatter_dequantize,
    solve_lambda,
    uniform_quantize,
)
from .coding import (
    DecodedModel,
    EncodedModel,
    EntropyRatio,
    IndexDiffCode,
    PrefixCode,
    build_huffman,
    compression_ratio_entropy,
    compression_ratio_exact,
    decode_assignments,
    encode_assignments,
    entropy_bits,
    fixed_length_code,
    huffman_lengths,
    index_diff_code,
)
from .refnet import (
    AdamState,
    Dataset,
    FineTuneConfig,
    MlpSpec,
    TrainConfig,
    TrainedModel,
    adam_curvature,
    eval_accuracy,
    fine_tune_centers,
    forward_loss,
    hessian_diag_exact,
    hessian_diag_gn,
    identity_curvature,
    init_params,
    load_csv,
    make_blobs,
    prune_magnitude,
    train_adam,
)

__version__ = "0.1.0"
