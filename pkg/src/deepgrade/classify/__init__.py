"""Subject-level classifiers over grading graphs and structure volumes."""
