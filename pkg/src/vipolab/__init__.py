"""Model-based offline RL toolkit: tabular ground truth, value-inconsistency
penalised dynamics-model training, pessimistic planners and gradient oracles."""
from .approximator import Layout, ParamVector, ValuePair, forward, grad_params, soft_update
from .dataset import (OfflineDataset, SpaceSpec, Transition, collect, estimate_behavior_policy, load,
                      neighborhood_drop, save, split)
from .dynamics import (GaussianEnsemble, TabularDynamicsModel, fit_mle_tabular, max_aleatoric_uncertainty,
                       nll_grad, nll_loss, sample)
from .errors import (ConfigError, ConvergenceError, DivergenceError, InvalidInputError, ParseError,
                     VipoLabError)
from .mdp import TabularMdp, TabularPolicy, apply_bellman, chain_mdp, exact_value, gridworld, policy_return
from .oracle import (discounted_occupancy, exact_theorem_gradient, finite_difference, mc_theorem_gradient,
                     psi)
from .planner import (PlannerConfig, SyntheticBuffer, bellman_inconsistency, penalized_target,
                      plan_actor_critic, plan_tabular, rollout)
from .value_learning import empirical_bellman, fit_vd_msbe, fit_vm, solve_vd, solve_vm_tabular
from .vipo import (TrainConfig, TrainReport, augmented_loss, surrogate_gradient, train_vipo,
                   value_inconsistency)

__version__ = "0.1.0"
