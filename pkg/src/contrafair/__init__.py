"""Causal audit engine for counterfactual and contrastive fairness of decision predictors."""

__version__ = "0.1.0"
