"""Primal-dual constrained training with dual-variable driven batch
active learning, plus a numeric verification lab for the duality theory
the sample-informativeness signal rests on."""

from .data import DatasetSpec, Pool, clone_redundant, load_csv, load_idx, split_initial, synth_blobs
from .dualhead import DualHeadConfig, predict_duals, train_dual_head
from .duality import ConvexInstance, KKTSolution, sensitivity_check, solve_instance, weak_duality_probe
from .generate import AscentConfig, ascend_input, input_gradient
from .harness import CurvePoint, ExperimentConfig, al_round, run_experiment, sweep_clusters, sweep_redundancy
from .losses import PerSampleLoss, cross_entropy, dual_head_fit_loss, mse
from .numerics import (
    DenseLayer,
    MLPArchitecture,
    ModelParams,
    NumericError,
    OptimizerState,
    ShapeError,
    backward_lagrangian,
    forward,
    init_params,
    optimizer_step,
)
from .pdcl import DualState, PDCLConfig, TrainReport, compute_slacks, dual_step, empirical_lagrangian, pdcl_train
from .selection import (
    ClusterAssignment,
    QueryBatch,
    ally_select,
    coreset_select,
    kmeans,
    random_select,
    top_dual_select,
)

__version__ = "0.1.0"
