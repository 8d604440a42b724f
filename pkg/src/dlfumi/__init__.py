"""Multiple-instance dictionary learning with a shared background dictionary."""

__version__ = "0.1.0"

from .core import Dictionary, FitResult, Hyperparams, fit
from .data import Bag, MILDataset, SynthSpec, load_usps, make_bags, synth_generate
from .estimator import DLFUMI, DLFUMIClassifier
from .inference import MulticlassModel, classify, detect
from .metrics import average_runs, multiclass_accuracy, roc, tpr_at_fpr

__all__ = [
    "Bag", "DLFUMI", "DLFUMIClassifier", "Dictionary", "FitResult", "Hyperparams",
    "MILDataset", "MulticlassModel", "SynthSpec", "average_runs", "classify", "detect",
    "fit", "load_usps", "make_bags", "multiclass_accuracy", "roc", "synth_generate",
    "tpr_at_fpr",
]
