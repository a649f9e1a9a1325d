import logging
from pathlib import Path
from typing import Dict, Iterable, Optional

import mlflow

import src.config as config

logger = logging.getLogger(__name__)


def set_mlflow_tracking() -> Optional[object]:
    """
    Point MLflow at MLFLOW_TRACKING_URI.

    Returns the mlflow module, or None when no tracking server is configured.
    """
    uri = config.MLFLOW_TRACKING_URI
    if not uri:
        return None
    mlflow.set_tracking_uri(uri)
    logger.info(f"MLflow tracking URI set to {uri}.")
    return mlflow


def log_stage_to_mlflow(
    stage: str,
    params: Optional[Dict] = None,
    metrics: Optional[Dict[str, float]] = None,
    artifacts: Iterable[Path] = (),
    experiment_name: str = config.EXPERIMENT_NAME,
) -> bool:
    """
    Log one pipeline stage as an MLflow run.

    Does nothing (and returns False) when MLFLOW_TRACKING_URI is unset.
    """
    if set_mlflow_tracking() is None:
        return False
    try:
        mlflow.set_experiment(experiment_name)
        with mlflow.start_run(run_name=stage):
            if params:
                mlflow.log_params(params)
                logger.info(f"Logged {len(params)} parameters for stage {stage}")
            if metrics:
                mlflow.log_metrics({k: float(v) for k, v in metrics.items()})
                logger.info(f"Logged metrics for stage {stage}: {metrics}")
            for path in artifacts:
                mlflow.log_artifact(str(path))
        return True
    except Exception as e:
        logger.error(f"An error occurred while logging to MLflow: {e}")
        raise
