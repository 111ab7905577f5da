from .a2c import A2C, A2CConfig, RolloutBatch, compute_gae, evaluate
from .dqn import DoubleDQN, DQNConfig, OffPolicyRunner, offpolicy_loop
from .policy import ActorCritic, QNetwork

__all__ = ["A2C", "A2CConfig", "ActorCritic", "DQNConfig", "DoubleDQN", "OffPolicyRunner", "QNetwork",
           "RolloutBatch", "compute_gae", "evaluate", "offpolicy_loop"]
