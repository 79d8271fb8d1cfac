"""Block-sparse attention with centroid top-k routing, instrumented tiled
kernels, causal key convolution, and an SNR model of router retrieval."""

from .core import (
    ConfigError,
    FormatError,
    LengthError,
    MobaConfig,
    MobaError,
    OpCounters,
    PlanValidationError,
    RoutingPlan,
    ShapeError,
    Tensor,
    tensor_read,
    tensor_write,
    validate_plan,
)
from .reference import (
    AttentionOutput,
    dense_causal_backward,
    dense_causal_forward,
    naive_moba_forward,
    plan_attention_forward,
)
from .router import CentroidMatrix, build_plan, build_varlen, compute_centroids, select_topk
from .attention import BackwardWorkspace, SoftmaxState, moba_attention, moba_backward, moba_forward
from .keyconv import ConvKernel, key_conv_backward, key_conv_forward, random_kernel
from .snr import (
    McEstimate,
    SignalModel,
    effective_gap,
    expected_diff,
    norm_ppf,
    p_fail,
    required_snr,
    simulate_retrieval,
    snr,
    var_diff,
)

__version__ = "0.1.0"
