import pandas as pd
import plotly.express as px
import plotly.graph_objects as go


def plot_transfer(transfer: pd.DataFrame) -> go.Figure:
    """Top-k accuracy on the real test split for twin-only, fine-tuned and real-only models."""
    fig = px.line(
        transfer,
        x="k",
        y="accuracy",
        color="model",
        markers=True,
        title="Transfer learning: top-k accuracy on real test data",
    )
    fig.update_layout(yaxis_range=[0, 1])
    return fig


def plot_topk(topk: pd.DataFrame) -> go.Figure:
    fig = px.line(
        topk,
        x="m_tilde",
        y="accuracy",
        color="method",
        line_dash="k",
        markers=True,
        title="Top-k accuracy versus number of sensing beams",
    )
    fig.update_xaxes(title="sensing beams M~")
    return fig


def plot_shap_bar(bars: pd.DataFrame, top: int = 12) -> go.Figure:
    """
    Mean |SHAP| of the top sensing beams with the remainder summed as "Others".

    Args:
        bars (pd.DataFrame): Rows with ``beam`` and ``mean_abs_shap`` in ranking order.
        top (int): Number of beams shown individually.

    Returns:
        plotly.graph_objects.Figure: Horizontal bar chart.
    """
    head = bars.head(top)
    labels = [f"beam {b}" for b in head["beam"]]
    values = list(head["mean_abs_shap"])
    if len(bars) > top:
        labels.append("Others")
        values.append(float(bars["mean_abs_shap"].iloc[top:].sum()))
    fig = go.Figure(go.Bar(x=values[::-1], y=labels[::-1], orientation="h"))
    fig.update_layout(title="Mean |SHAP| per sensing beam", xaxis_title="mean |SHAP|")
    return fig


def plot_metric_vs_m(metrics: pd.DataFrame, column: str, title: str) -> go.Figure:
    fig = px.line(
        metrics,
        x="m_tilde",
        y=column,
        color="method",
        line_dash="k",
        markers=True,
        title=title,
    )
    fig.update_xaxes(title="sensing beams M~")
    return fig


def plot_reliability(reliability: pd.DataFrame) -> go.Figure:
    """Within-bin accuracy per score bin, one trace per (scorer, input set)."""
    fig = go.Figure()
    for (scorer, inputs), group in reliability.groupby(["scorer", "inputs"], sort=True):
        fig.add_trace(
            go.Bar(
                x=group["lower"] + 0.5 / len(group),
                y=group["accuracy"],
                name=f"{scorer} / {inputs}",
                width=0.9 / len(group),
            )
        )
    fig.add_trace(
        go.Scatter(x=[0, 1], y=[0, 1], mode="lines", name="ideal", line={"dash": "dash"})
    )
    fig.update_layout(
        barmode="group",
        title="Reliability diagram",
        xaxis_title="credibility / confidence",
        yaxis_title="accuracy",
    )
    return fig
