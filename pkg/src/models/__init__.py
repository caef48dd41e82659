"""Built-in POMP models."""
from models.linear_gaussian import (KalmanResult, LinearGaussianSpec, kalman_fd_gradient, kalman_loglik, kalman_mle,
                                    lg_simulate, linear_gaussian_model)
from models.malaria import (MalariaSpec, euler_maruyama_simulate, latent_force, malaria_drift, malaria_model,
                            negbin_logpdf, negbin_sample, periodic_bspline_basis, synthetic_rainfall)

__all__ = [
    "KalmanResult", "LinearGaussianSpec", "kalman_fd_gradient", "kalman_loglik", "kalman_mle", "lg_simulate",
    "linear_gaussian_model", "MalariaSpec", "euler_maruyama_simulate", "latent_force", "malaria_drift",
    "malaria_model", "negbin_logpdf", "negbin_sample", "periodic_bspline_basis", "synthetic_rainfall",
]
