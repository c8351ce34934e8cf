"""calibqa: calibration toolkit for question answering.

Trains and evaluates binary correctness predictors over QA model outputs,
computes selective-prediction metrics, and reranks answer candidates, all on
top of a model-agnostic line-delimited record format.
"""

__version__ = "0.1.0"
