"""Model contract, built-in baselines, density fallback and the plugin protocol."""
from .core import (BATCH_SIZE, DEFAULT_K, LossSpec, ModelSpec, ModelState, PredictionEntry,
                   PredictionSet, TrainConfig, attack_loss, finite_difference_gradient,
                   load_predictions, model_capabilities, model_init, model_load,
                   model_log_likelihood, model_predict, model_save, model_train,
                   prediction_loss_gradient, sample_rng, save_predictions)
from .density import GaussianKDE, fit_density_estimator

__all__ = [
    "BATCH_SIZE", "DEFAULT_K", "GaussianKDE", "LossSpec", "ModelSpec", "ModelState", "PredictionEntry",
    "PredictionSet", "TrainConfig", "attack_loss", "finite_difference_gradient", "fit_density_estimator",
    "load_predictions", "model_capabilities", "model_init", "model_load", "model_log_likelihood",
    "model_predict", "model_save", "model_train", "prediction_loss_gradient", "sample_rng",
    "save_predictions",
]
