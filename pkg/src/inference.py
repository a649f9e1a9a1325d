import numpy as np
import pandas as pd

from src.mlp import MlpModel, forward, topk_from_probs


def get_model_predictions(model: MlpModel, features: np.ndarray, k: int = 1) -> pd.DataFrame:
    """Top-k beams and the top-1 softmax confidence for each row."""
    probs = forward(model, features).probs
    top = topk_from_probs(probs, k)
    results = pd.DataFrame({f"beam_{i + 1}": top[:, i] for i in range(k)})
    results["confidence"] = probs[np.arange(len(probs)), top[:, 0]]
    return results
