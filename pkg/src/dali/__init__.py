"""Leadership-aware group recommendation with a neuro-symbolic group-type discriminator and self-evolving rules."""

from dali.data import Dataset, Group, Label, SynthConfig, generate_synthetic, load_dataset, split_groups
from dali.kernels import backend
from dali.rules import RuleSet, parse_rule, parse_rules, seed_rules

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Group",
    "Label",
    "RuleSet",
    "SynthConfig",
    "backend",
    "generate_synthetic",
    "load_dataset",
    "parse_rule",
    "parse_rules",
    "seed_rules",
    "split_groups",
]
