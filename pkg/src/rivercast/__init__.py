"""Graph-recurrent river forecasting: routing oracle, tape autodiff, model, training and evaluation."""

__version__ = "0.1.0"
