"""Multi-disease retinal image classification pipeline with stacked ensembles."""

__version__ = "0.1.0"

# bumped whenever the on-disk layout of a file format changes
FORMAT_VERSIONS = {
    "manifest": 1,
    "folds": 1,
    "upsample_plan": 1,
    "feature_table": 1,
    "fens_tensor": 1,
    "class_weights": 1,
    "reference_model": 1,
    "training_history": 1,
    "predictions": 1,
    "stacked_model": 1,
    "eval_report": 1,
    "roc_curve": 1,
    "run_config": 1,
}
