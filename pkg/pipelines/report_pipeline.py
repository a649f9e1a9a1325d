import logging
from typing import Dict, List

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.parquet as pq

from pipelines.context import StageContext
from src.plot_utils import plot_metric_vs_m, plot_reliability, plot_shap_bar, plot_topk, plot_transfer

logger = logging.getLogger(__name__)

INPUTS = ["transfer.csv", "topk.csv", "shap_bar.csv", "metrics.csv", "reliability.csv"]
TABLES = [
    "transfer_topk.csv",
    "topk_vs_sensing.csv",
    "shap_bars.csv",
    "average_snr.csv",
    "effective_se.csv",
    "reliability_bins.csv",
]
BUNDLE = "figure_data.parquet"
OUTPUTS = TABLES + [BUNDLE]
SHAP_BARS_SHOWN = 12


def shap_bar_table(bars: pd.DataFrame, top: int = SHAP_BARS_SHOWN) -> pd.DataFrame:
    """Top beams by mean |SHAP| plus one "Others" row holding the rest."""
    head = bars.head(top)
    table = pd.DataFrame(
        {
            "label": [f"beam {b}" for b in head["beam"]],
            "beam": head["beam"].astype(int),
            "mean_abs_shap": head["mean_abs_shap"],
        }
    )
    if len(bars) > top:
        others = {"label": "Others", "beam": -1, "mean_abs_shap": bars["mean_abs_shap"].iloc[top:].sum()}
        table = pd.concat([table, pd.DataFrame([others])], ignore_index=True)
    return table


def build_tables(inputs: Dict[str, pd.DataFrame]) -> Dict[str, pd.DataFrame]:
    metrics = inputs["metrics.csv"]
    keys = ["method", "m_tilde", "k"]
    return {
        "transfer_topk.csv": inputs["transfer.csv"],
        "topk_vs_sensing.csv": inputs["topk.csv"],
        "shap_bars.csv": shap_bar_table(inputs["shap_bar.csv"]),
        "average_snr.csv": metrics[keys + ["average_snr_db"]],
        "effective_se.csv": metrics[keys + ["effective_se"]],
        "reliability_bins.csv": inputs["reliability.csv"],
    }


def long_format(tables: Dict[str, pd.DataFrame]) -> pd.DataFrame:
    """
    Stack every table into (figure, row, column, value, label) records.

    Numeric cells land in ``value``; everything else in ``label``.
    """
    records = []
    for name, table in tables.items():
        figure = name.removesuffix(".csv")
        for row, values in enumerate(table.itertuples(index=False)):
            for column, cell in zip(table.columns, values):
                numeric = isinstance(cell, (int, float, np.integer, np.floating)) and not isinstance(cell, bool)
                records.append(
                    {
                        "figure": figure,
                        "row": row,
                        "column": column,
                        "value": float(cell) if numeric else float("nan"),
                        "label": "" if numeric else str(cell),
                    }
                )
    return pd.DataFrame(records, columns=["figure", "row", "column", "value", "label"])


def _write_table(table: pd.DataFrame, path, note: str) -> None:
    with open(path, "w", newline="") as handle:
        handle.write(f"# {note}\n")
        table.to_csv(handle, index=False)


def run_report(ctx: StageContext) -> List[str]:
    """
    Flatten the stage outputs into one figure-data bundle.

    Every table starts with a comment line flagging the configured frame
    length, which is an assumption rather than a measured quantity.
    """
    store = ctx.store
    t_frame = ctx.cfg.timing.t_frame_ms
    note = f"t_frame_ms={t_frame:g} (assumed frame length; set timing.t_frame_ms to change)"

    logger.info("Step 1: Collecting stage outputs...")
    inputs = {name: pd.read_csv(store.path(name)) for name in INPUTS}
    tables = build_tables(inputs)

    logger.info(f"Step 2: Writing {len(tables)} figure tables and {BUNDLE}...")
    for name, table in tables.items():
        _write_table(table, store.path(name), note)
    bundle = pa.Table.from_pandas(long_format(tables), preserve_index=False)
    bundle = bundle.replace_schema_metadata({"t_frame_ms": f"{t_frame:g}"})
    pq.write_table(bundle, store.path(BUNDLE))

    logger.info("Step 3: Rendering plotly figures...")
    figures_dir = store.path("figures")
    figures_dir.mkdir(exist_ok=True)
    learned = inputs["metrics.csv"].query("m_tilde > 0 and method in ['learned', 'fixed']")
    figures = {
        "transfer_topk": plot_transfer(inputs["transfer.csv"]),
        "topk_vs_sensing": plot_topk(inputs["topk.csv"]),
        "shap_bars": plot_shap_bar(inputs["shap_bar.csv"], top=SHAP_BARS_SHOWN),
        "average_snr": plot_metric_vs_m(learned, "average_snr_db", "Average SNR versus sensing beams"),
        "effective_se": plot_metric_vs_m(
            learned, "effective_se", f"Effective spectral efficiency (T_frame = {t_frame:g} ms)"
        ),
        "reliability_bins": plot_reliability(inputs["reliability.csv"]),
    }
    for name, fig in figures.items():
        fig.write_json(str(figures_dir / f"{name}.json"))
    return OUTPUTS


if __name__ == "__main__":
    from pipelines.cli import main

    raise SystemExit(main(["report"]))
