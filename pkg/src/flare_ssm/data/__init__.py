from .generator import generate_dataset, generate_latent, label_from_flux
from .preprocess import SolarSample, preprocess
from .sampling import crt_resample
from .splits import split_folds
from .augment import augment

__all__ = ["generate_dataset", "generate_latent", "label_from_flux", "SolarSample",
           "preprocess", "crt_resample", "split_folds", "augment"]
