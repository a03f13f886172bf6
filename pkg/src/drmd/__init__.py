"""Drift-resilient malware detection with a one-step MDP, PPO, rejection and active learning."""

from .agent import AgentConfig, DrmdAgent, SlidingWindow
from .baselines import LinearSvm, MlpBaselineConfig, MlpClassifier
from .data import DriftGenConfig, generate_drift_dataset, load_dataset
from .icmdp import IcmdpAgent, IcmdpConfig
from .mdp import Action, RewardConfig, Sample
from .metrics import aut, f1
from .timeline import EvalReport, ProtocolConfig, run_monthly_eval, split_timeline

__version__ = "0.1.0"

__all__ = [
    "Action", "AgentConfig", "DriftGenConfig", "DrmdAgent", "EvalReport", "IcmdpAgent", "IcmdpConfig", "LinearSvm",
    "MlpBaselineConfig", "MlpClassifier", "ProtocolConfig", "RewardConfig", "Sample", "SlidingWindow", "aut", "f1",
    "generate_drift_dataset", "load_dataset", "run_monthly_eval", "split_timeline",
]
