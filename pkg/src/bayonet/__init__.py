"""bayonet: multi-exit Bayesian network toolkit.

Transforms single-exit feed-forward nets into multi-exit Monte-Carlo-dropout
networks, evaluates accuracy/calibration/FLOP cost at desk scale, plans
spatial/temporal mappings of the stochastic passes onto abstract hardware
engines (validated by an event simulator), grid-searches the joint
algorithm/hardware space, and emits a deterministic hardware plan document.
"""

__version__ = "0.1.0"

from .data import (
    SyntheticDataset,
    checkerboard,
    gaussian_blobs,
    make_dataset,
    read_bten,
    two_spirals,
    write_bten,
)
from .dse import (
    Constraints,
    DesignPoint,
    Phase1Result,
    Phase3Result,
    Priority,
    SearchBudget,
    SearchGrids,
    export_results,
    phase1_search,
    phase3_search,
    quantize_graph,
)
from .errors import (
    BayonetError,
    DivergenceDetected,
    DoesNotFit,
    EmptyFeasibleSet,
    EmptyInput,
    IndivisibleSamples,
    NoBayesianComponent,
    ParseError,
    PolicyError,
    SchemaError,
    ShapeMismatch,
    ShapeMissing,
    VerificationFailed,
)
from .flops import (
    FlopReport,
    count_flops,
    multi_exit_cost,
    reduction_rate,
    single_exit_cost,
)
from .graph import (
    CHANNEL_WISE,
    CONV,
    DENSE,
    ELEMENT_WISE,
    EXIT,
    GAP,
    MAXPOOL,
    MCDROPOUT,
    RELU,
    SOFTMAX,
    FixedPointFormat,
    LayerNode,
    NetworkGraph,
    TensorShape,
    build_chain,
    graph_hash,
    infer_shapes,
    load_graph,
    save_graph,
)
from .mapper import (
    MIXED,
    SPATIAL,
    TEMPORAL,
    DeviceProfile,
    FitReport,
    HwEstimate,
    MappingPlan,
    check_fit,
    estimate,
    load_device,
    plan,
    simulate,
)
from .metrics import BinStat, CalibrationReport, accuracy, ece
from .plan import emit_plan, load_plan, save_plan, serialize_plan, verify_plan
from .rng import Rng, mix64, pass_stream, sample_stream
from .runtime import (
    CUMULATIVE_ENSEMBLE,
    PER_EXIT,
    ExitDecision,
    PredictionSet,
    apply_fixed_point,
    confidence_exit,
    ensemble,
    exit_decisions,
    flops_to_exit,
    forward_deterministic,
    forward_mc,
    forward_mc_batch,
    mcd_layer,
)
from .train import EvalReport, TrainConfig, TrainResult, evaluate, init_weights, train
from .transform import (
    ExitPolicy,
    McdPolicy,
    annotate_quantization,
    boundary_elements,
    insert_exits,
    insert_mcd,
    scale_channels,
    split_components,
    strip_quantization,
)
