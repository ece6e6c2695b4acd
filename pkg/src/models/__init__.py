__all__ = ["barrier", "learned_dynamics", "predictors"]
