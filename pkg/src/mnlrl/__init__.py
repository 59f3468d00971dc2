"""Optimistic RL in multinomial-logit mixture MDPs: model, estimators, planners, agents and harness."""

__version__ = "0.1.0"
