"""Beat-image ECG arrhythmia classification with patient-metadata fusion."""
from .estimator import RecgnitionClassifier
from .preprocess import BeatRasterizer
from .cca import CanonicalCorrelation

__all__ = ["RecgnitionClassifier", "BeatRasterizer", "CanonicalCorrelation"]
__version__ = "0.1.0"
