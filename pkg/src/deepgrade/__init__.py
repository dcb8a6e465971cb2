"""Deep grading of structural MRI with graph and volume classifiers, plus a phantom testbed."""

__version__ = "0.1.0"
