"""Hybrid-domain spectral graph filters with stability instrumentation."""

from .autodiff import Param, Tape, backward, grad_check
from .filters import (
    BasisStack,
    KrawtchoukShape,
    cheb_propagate,
    collapse_degree,
    krawtchouk_hypergeom,
    krawtchouk_propagate,
    overflow_degree,
    scalar_response,
)
from .graphs import Graph, SbmConfig, generate_sbm, l_hat, l_scaled, load_graph, make_folds, sym_laplacian
from .linalg import CsrMatrix, finite_probe, jacobi_eigh, spmm
from .models import (
    BranchOutputs,
    ModelConfig,
    ModelParams,
    build_forward,
    init_params,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .training import RunResult, StabilityEvent, TrainConfig, cross_validate, majority_baseline, train

__version__ = "0.1.0"
