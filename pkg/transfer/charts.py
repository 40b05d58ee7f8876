import plotly.graph_objects as go
from plotly.subplots import make_subplots
import pandas as pd

COLORS = {
    "blue": "#00d4ff",
    "green": "#00ff88",
    "orange": "#ffa500",
    "red": "#ff4d6d",
    "grey": "#9aa0a6",
}

METRIC_TITLES = {
    "test_loss": ("Test loss on target images with clutter", "Mean L1 error (m)"),
    "mean_capped_distance": ("Final distance to the bottle opening", "Mean capped distance (m)"),
    "success_rate": ("Average success rate", "Success rate"),
}


def plot_metric_bars(bars: pd.DataFrame, metric: str, colors: dict = None):
    # One bar per regime, the AVG row highlighted
    if colors is None:
        colors = COLORS
    title, axis = METRIC_TITLES.get(metric, (metric, metric))
    data = bars[bars["metric"] == metric]
    bar_colors = [colors["orange"] if g == "AVG" else colors["blue"] for g in data["group"]]

    fig = go.Figure()
    fig.add_trace(go.Bar(
        x=data["regime"],
        y=data["value"],
        error_y=dict(type="data", array=data["stderr"].fillna(0.0)) if "stderr" in data else None,
        marker_color=bar_colors,
        name=metric,
    ))
    fig.update_layout(
        title=title,
        xaxis_title="Regime",
        yaxis_title=axis,
        template="plotly_dark",
    )
    return fig


def plot_category_losses(ablation: pd.DataFrame, colors: dict = None):
    # Grouped bars: one group per test category, one bar per training setup
    if colors is None:
        colors = COLORS
    palette = [colors["blue"], colors["green"], colors["orange"], colors["red"], colors["grey"]]
    fig = go.Figure()
    for i, (setup, rows) in enumerate(ablation.groupby("setup", sort=False)):
        fig.add_trace(go.Bar(
            x=rows["category"].astype(str),
            y=rows["test_loss"],
            name=setup,
            marker_color=palette[i % len(palette)],
        ))
    fig.update_layout(
        barmode="group",
        title="Test loss per bottle category",
        xaxis_title="Category",
        yaxis_title="Mean L1 error (m)",
        template="plotly_dark",
    )
    return fig


def plot_loss_history(histories: dict, colors: dict = None):
    # Total training loss and test loss per epoch, one line per regime
    if colors is None:
        colors = COLORS
    palette = list(colors.values())
    fig = make_subplots(rows=1, cols=2, subplot_titles=("Training loss", "Test loss"))
    for i, (regime, history) in enumerate(histories.items()):
        color = palette[i % len(palette)]
        fig.add_trace(go.Scatter(x=history["epoch"], y=history["total"], name=regime,
                                 line=dict(color=color, width=2)), row=1, col=1)
        fig.add_trace(go.Scatter(x=history["epoch"], y=history["test_loss"], name=regime, showlegend=False,
                                 line=dict(color=color, width=2, dash="dot")), row=1, col=2)
    fig.update_xaxes(title_text="Epoch")
    fig.update_layout(template="plotly_dark")
    return fig
