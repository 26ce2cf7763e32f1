"""Plotly figure of a macro solution: pressure contour with a velocity quiver."""
import logging
from pathlib import Path

import numpy as np
import plotly.figure_factory as ff
import plotly.graph_objects as go

from src.utils.helpers import ensure_output_directory

logger = logging.getLogger(__name__)

COLORS = {
    'quiver': '#1f2937',
    'background': '#ffffff',
}


def macro_figure(solution, stride: int = 4, title: str = "Darcy pressure and averaged velocity") -> go.Figure:
    """Contour of p and quiver of U' sampled every ``stride`` cells."""
    z1, z2 = solution.problem.centers()
    fig = go.Figure()
    fig.add_trace(go.Contour(
        x=z1[:, 0],
        y=z2[0, :],
        z=solution.p.T,
        colorscale="Viridis",
        colorbar=dict(title="p"),
        name="p",
    ))

    stride = max(1, int(stride))
    sub = (slice(stride // 2, None, stride), slice(stride // 2, None, stride))
    U1, U2 = solution.U_prime[0][sub], solution.U_prime[1][sub]
    magnitude = float(np.sqrt(U1 ** 2 + U2 ** 2).max()) if U1.size else 0.0
    if magnitude > 0.0:
        h = min(solution.problem.spacing) * stride
        quiver = ff.create_quiver(
            z1[sub].ravel(), z2[sub].ravel(), U1.ravel(), U2.ravel(),
            scale=0.9 * h / magnitude,
            line=dict(color=COLORS['quiver'], width=1),
            name="U'",
        )
        for trace in quiver.data:
            fig.add_trace(trace)

    fig.update_layout(
        title=title,
        xaxis_title="z1",
        yaxis_title="z2",
        plot_bgcolor=COLORS['background'],
        yaxis=dict(scaleanchor="x", scaleratio=1),
    )
    return fig


def plot_macro_solution(solution, path, stride: int = 4) -> Path:
    """Write the figure as standalone HTML; plots are derived artifacts only."""
    path = Path(path)
    ensure_output_directory(path.parent)
    macro_figure(solution, stride=stride).write_html(str(path), include_plotlyjs="cdn")
    logger.info("plot written to %s", path)
    return path
