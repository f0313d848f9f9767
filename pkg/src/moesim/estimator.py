"""Scikit-learn style wrapper around the SRU expert predictor.

The functional training API lives in :mod:`moesim.predictor`; this estimator
packages it as fit/predict/score so it composes with sklearn tooling
(get_params, set_params, clone, grid search over the training knobs).
"""

from sklearn.base import BaseEstimator

from .errors import ConfigurationError
from .predictor import (
    DEFAULT_SRU_LAYERS,
    HashTable,
    evaluate_accuracy,
    predict_batch,
    train_predictor,
)
from .workload import RoutingTrace


class SruExpertPredictor(BaseEstimator):
    """Predicts per-layer expert assignments for upcoming batches.

    Parameters mirror train_predictor; fit consumes a RoutingTrace whose
    oracle routing provides the labels.
    """

    def __init__(
        self,
        epochs: int = 200,
        learning_rate: float = 0.001,
        seed: int = 0,
        num_sru_layers: int = DEFAULT_SRU_LAYERS,
        sequences_per_step: int = 32,
    ):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed
        self.num_sru_layers = num_sru_layers
        self.sequences_per_step = sequences_per_step

    def fit(self, X: RoutingTrace, y=None):
        result = train_predictor(
            X,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            seed=self.seed,
            num_sru_layers=self.num_sru_layers,
            sequences_per_step=self.sequences_per_step,
        )
        self.params_ = result.params
        self.loss_curve_ = result.loss_curve
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise ConfigurationError("SruExpertPredictor is not fitted; call fit first")

    def predict(self, X) -> HashTable | list[HashTable]:
        """Hash table(s) for a Batch or for every batch of a RoutingTrace."""
        self._check_fitted()
        if isinstance(X, RoutingTrace):
            return [predict_batch(batch, self.params_) for batch in X.batches]
        return predict_batch(X, self.params_)

    def score(self, X: RoutingTrace, y=None) -> float:
        """Mean agreement with the trace's oracle routing."""
        self._check_fitted()
        scores = [
            evaluate_accuracy(predict_batch(batch, self.params_), batch.oracle_routing)
            for batch in X.batches
        ]
        return sum(scores) / len(scores)
