"""Mode connectivity of small neural networks under weight-permutation
symmetry: neuron alignment, Bezier curve finding, proximal alternating
refinement, adversarial robustness, and loss bounds."""

__version__ = "0.1.0"

from .alignment import (
    BlockPermutation,
    CostMatrix,
    align_networks,
    apply_block_permutation,
    build_cost,
    collect_activations,
    correlation_signature,
)
from .assignment import solve_assignment
from .attacks import PGDConfig, adversarial_train, pgd_attack, robust_curve_report
from .birkhoff import (
    BvnDecomposition,
    DoublyStochasticBlock,
    bvn_decompose,
    project_birkhoff,
    sample_permutations,
)
from .bounds import BoundReport, build_tight_instance, compute_bounds, tightness_probe
from .curves import (
    BezierCurve,
    CurveMetrics,
    CurveTrainConfig,
    curve_point,
    evaluate_curve,
    init_linear,
    plane_grid,
    train_curve,
)
from .data import Dataset, generate, load_csv, save_csv
from .nets import (
    Network,
    NetworkSpec,
    TrainConfig,
    backward,
    forward,
    loss,
    spectral_norm,
    train_sgd,
)
from .pam import PamConfig, perm_subproblem, phi_subproblem, run_pam
