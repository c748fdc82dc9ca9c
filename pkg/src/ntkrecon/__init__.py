"""Two-hidden-layer networks in the tangent-kernel regime: training dynamics,
parameter-difference reconstruction attacks and kernel distillation."""
from .network import Architecture, forward, init_params, param_gradient, param_jvp, param_vjp, input_grad_of_vjp
from .kernels import RidgePolicy, analytic_ntk, empirical_ntk, kernel_distance, solve_alpha
from .dynamics import LabeledDataset, TrainConfig, encode_labels, train
from .attack import AttackConfig, run_attack, run_attack_batched
from .metrics import greedy_pair
from .distill import DistilledSet, distill, kip_loss, rkip_loss, retrain_eval

__version__ = "0.1.0"
